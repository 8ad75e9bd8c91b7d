"""Synthetic linear Ex-BMDP data.

The endogenous state performs a random walk ``s' = s + a`` with
``a ~ N(0, I)``. A discrete exogenous state ``xi`` switches with probability
``p_switch`` to one of the other ``n_xi - 1`` states, and observations are
``o = H_xi s`` with ``H_xi = H0 + alpha * R_xi``.

Every transition also carries a second exogenous chain ``xi_tilde`` that
re-renders the same ``(s, s')`` under a different exogenous state; it feeds
the cross-exogenous objective and the paired metrics.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property

import numpy as np

from . import container
from .numerics import RngStream

# stream ids derived from a config seed
STREAM_EMISSIONS = 1
STREAM_TRAJECTORIES = 2

_CHUNK = 16384


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LinearEnvConfig:
    d_s: int = 8
    d_a: int = 8
    d_o: int = 128
    n_xi: int = 8
    p_switch: float = 0.0
    alpha: float = 0.5
    n_traj: int = 8000
    traj_len: int = 16
    seed: int = 0

    def validate(self) -> "LinearEnvConfig":
        if self.d_a != self.d_s:
            raise ConfigError(f"d_a ({self.d_a}) must equal d_s ({self.d_s}) since s' = s + a")
        if min(self.d_s, self.d_o) < 1:
            raise ConfigError("dimensions must be positive")
        if self.n_xi < 1:
            raise ConfigError("n_xi must be at least 1")
        if not 0.0 <= self.p_switch <= 1.0:
            raise ConfigError(f"p_switch={self.p_switch} outside [0, 1]")
        if self.p_switch > 0 and self.n_xi == 1:
            raise ConfigError("p_switch > 0 requires n_xi >= 2 (no other state to switch to)")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.n_traj < 1 or self.traj_len < 2:
            raise ConfigError("need n_traj >= 1 and traj_len >= 2")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LinearEnvConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class EmissionSet:
    H0: np.ndarray
    R: np.ndarray  # (n_xi, d_o, d_s)
    alpha: float

    @property
    def n_xi(self) -> int:
        return self.R.shape[0]

    @cached_property
    def H(self) -> np.ndarray:
        return self.H0[None] + self.alpha * self.R

    def matrix(self, xi: int) -> np.ndarray:
        if not 0 <= xi < self.n_xi:
            raise IndexError(f"exogenous index {xi} out of range [0, {self.n_xi})")
        return self.H[xi]


def build_emissions(cfg: LinearEnvConfig, rng: RngStream | None = None) -> EmissionSet:
    """H0 and R_xi with i.i.d. N(0, 1/d_s) entries."""
    cfg.validate()
    rng = rng or RngStream(cfg.seed, STREAM_EMISSIONS)
    scale = 1.0 / np.sqrt(cfg.d_s)
    H0 = rng.normal((cfg.d_o, cfg.d_s), scale)
    R = rng.normal((cfg.n_xi, cfg.d_o, cfg.d_s), scale)
    return EmissionSet(H0, R, float(cfg.alpha))


def render(s: np.ndarray, xi, em: EmissionSet) -> np.ndarray:
    """``H_xi s`` for one state, or row-wise for a batch of states."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        return em.matrix(int(xi)) @ s
    xi = np.asarray(xi)
    if xi.size and (xi.min() < 0 or xi.max() >= em.n_xi):
        raise IndexError(f"exogenous index out of range [0, {em.n_xi})")
    out = np.empty((s.shape[0], em.H0.shape[0]))
    for k in np.unique(xi):
        mask = xi == k
        out[mask] = s[mask] @ em.H[k].T
    return out


@dataclass(frozen=True)
class TransitionBatch:
    """Aligned transitions plus the paired exogenous stream.

    Observations and the q/eps decomposition are derived on first access
    (they are large: rows x d_o). Use :meth:`take` for minibatches.
    """

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    xi: np.ndarray
    xi_next: np.ndarray
    em: EmissionSet
    xi_tilde: np.ndarray | None = None
    xi_tilde_next: np.ndarray | None = None
    cfg: LinearEnvConfig | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return self.s.shape[0]

    @property
    def has_pairs(self) -> bool:
        return self.xi_tilde is not None

    @property
    def cross(self) -> np.ndarray:
        """Rows whose paired stream sits in a different exogenous state."""
        if not self.has_pairs:
            return np.zeros(len(self), dtype=bool)
        return self.xi_tilde != self.xi

    def take(self, idx) -> "TransitionBatch":
        sel = lambda x: None if x is None else x[idx]  # noqa: E731
        sub = TransitionBatch(
            self.s[idx], self.a[idx], self.s_next[idx], self.xi[idx], self.xi_next[idx],
            self.em, sel(self.xi_tilde), sel(self.xi_tilde_next), self.cfg,
        )
        for name in _DERIVED:
            if name in self.__dict__:
                sub.__dict__[name] = self.__dict__[name][idx]
        return sub

    def materialize(self, *names: str) -> "TransitionBatch":
        """Compute and cache derived arrays so that :meth:`take` just slices them."""
        for name in names or _DERIVED:
            getattr(self, name)
        return self

    def _pairs(self):
        if not self.has_pairs:
            raise ValueError("batch has no paired exogenous stream; regenerate with pairs")

    @cached_property
    def o(self):
        return render(self.s, self.xi, self.em)

    @cached_property
    def o_next(self):
        return render(self.s_next, self.xi_next, self.em)

    @cached_property
    def o_tilde(self):
        self._pairs()
        return render(self.s, self.xi_tilde, self.em)

    @cached_property
    def o_tilde_next(self):
        self._pairs()
        return render(self.s_next, self.xi_tilde_next, self.em)

    @cached_property
    def q(self):
        """Controllable change h(s', xi) - h(s, xi)."""
        return render(self.s_next, self.xi, self.em) - self.o

    @cached_property
    def eps(self):
        """Exogenous noise h(s', xi') - h(s', xi)."""
        return self.o_next - render(self.s_next, self.xi, self.em)

    @cached_property
    def q_tilde(self):
        self._pairs()
        return render(self.s_next, self.xi_tilde, self.em) - self.o_tilde

    @cached_property
    def eps_tilde(self):
        self._pairs()
        return self.o_tilde_next - render(self.s_next, self.xi_tilde, self.em)

    def chunks(self, size: int = _CHUNK):
        for start in range(0, len(self), size):
            yield self.take(slice(start, start + size))


_DERIVED = ("o", "o_next", "o_tilde", "o_tilde_next", "q", "eps", "q_tilde", "eps_tilde")


def _switch(xi: np.ndarray, p: float, n_xi: int, rng: RngStream) -> np.ndarray:
    # draw both uniforms unconditionally so the stream position never depends on data
    u = rng.uniform(xi.shape)
    offset = rng.integers(1, max(n_xi, 2), size=xi.shape)
    if n_xi == 1:
        return xi.copy()
    return np.where(u < p, (xi + offset) % n_xi, xi)


def _other(xi: np.ndarray, n_xi: int, rng: RngStream) -> np.ndarray:
    offset = rng.integers(1, max(n_xi, 2), size=xi.shape)
    return (xi + offset) % n_xi if n_xi > 1 else xi.copy()


def generate(cfg: LinearEnvConfig, em: EmissionSet | None = None,
             rng: RngStream | None = None) -> TransitionBatch:
    """Roll out ``n_traj`` trajectories of ``traj_len`` states each.

    Rows are trajectory-major: row ``i * (traj_len - 1) + t`` is step ``t`` of
    trajectory ``i``.
    """
    cfg.validate()
    em = em or build_emissions(cfg)
    if em.n_xi != cfg.n_xi or em.H0.shape != (cfg.d_o, cfg.d_s):
        raise ConfigError("emission set does not match config")
    rng = rng or RngStream(cfg.seed, STREAM_TRAJECTORIES)
    n, T, n_xi, p = cfg.n_traj, cfg.traj_len, cfg.n_xi, cfg.p_switch

    s = rng.normal((n, cfg.d_s))
    xi = rng.integers(0, n_xi, size=n)
    xt = _other(xi, n_xi, rng)
    S, A, SN, X, XN, XT, XTN = ([] for _ in range(7))
    for _ in range(T - 1):
        a = rng.normal((n, cfg.d_a))
        s_next = s + a
        xi_next = _switch(xi, p, n_xi, rng)
        xt_next = _switch(xt, p, n_xi, rng)
        # keep the paired chain away from the main one
        clash = xt_next == xi_next
        xt_next = np.where(clash, _other(xi_next, n_xi, rng), xt_next)
        for lst, v in zip((S, A, SN, X, XN, XT, XTN), (s, a, s_next, xi, xi_next, xt, xt_next)):
            lst.append(v)
        s, xi, xt = s_next, xi_next, xt_next

    def stack(lst):
        arr = np.stack(lst, axis=1)  # (n, T-1, ...)
        return arr.reshape((n * (T - 1),) + arr.shape[2:])

    return TransitionBatch(
        stack(S), stack(A), stack(SN), stack(X), stack(XN), em, stack(XT), stack(XTN), cfg
    )


def make_dataset(cfg: LinearEnvConfig) -> TransitionBatch:
    return generate(cfg, build_emissions(cfg))


def _row_sq(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def sensitivity(s_next: np.ndarray, em: EmissionSet) -> np.ndarray:
    """Row-wise max over exogenous pairs of ||h(s', xi_hat) - h(s', xi)||^2."""
    out = np.empty(s_next.shape[0])
    for start in range(0, s_next.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        obs = np.einsum("kij,nj->nki", em.H, s_next[sl])  # (n, n_xi, d_o)
        sq = np.einsum("nki,nki->nk", obs, obs)
        gram = np.einsum("nki,nli->nkl", obs, obs)
        dist = sq[:, :, None] + sq[:, None, :] - 2.0 * gram
        out[sl] = np.clip(dist, 0.0, None).reshape(dist.shape[0], -1).max(axis=1)
    return out


def eps_sq_norms(batch: TransitionBatch) -> np.ndarray:
    return np.concatenate([_row_sq(c.eps) for c in batch.chunks()])


def q_sq_norms(batch: TransitionBatch) -> np.ndarray:
    return np.concatenate([_row_sq(c.q) for c in batch.chunks()])


def noise_energy_report(batch: TransitionBatch) -> dict:
    """Empirical version of the switching-frequency x sensitivity decomposition."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    e2 = eps_sq_norms(batch)
    switched = batch.xi_next != batch.xi
    lhs = float(e2.mean())
    p_hat = float(switched.mean())
    cond = float(e2[switched].mean()) if switched.any() else 0.0
    delta = sensitivity(batch.s_next, batch.em)
    delta_h_hat = float(delta.max())
    rec = {
        "lhs": lhs,
        "p_hat": p_hat,
        "cond": cond,
        "product": p_hat * cond,
        "delta_h_hat": delta_h_hat,
        "delta_h_mean_switched": float(delta[switched].mean()) if switched.any() else 0.0,
        "bound": p_hat * delta_h_hat,
        "n_rows": len(batch),
    }
    rec["identity_rel_err"] = abs(lhs - rec["product"]) / max(abs(lhs), 1e-300)
    assert rec["identity_rel_err"] <= 1e-12 or lhs == rec["product"], rec
    assert lhs <= rec["bound"] * (1 + 1e-12) + 1e-300, rec
    return rec


def summary(batch: TransitionBatch) -> dict:
    return {
        "rows": len(batch),
        "mean_q_sq": float(q_sq_norms(batch).mean()),
        "mean_eps_sq": float(eps_sq_norms(batch).mean()),
        "switch_rate": float((batch.xi_next != batch.xi).mean()),
    }


# ---------------------------------------------------------------- export / import


def save(batch: TransitionBatch, path) -> None:
    cfg = batch.cfg.to_dict() if batch.cfg else {}
    arrays = {
        "s": batch.s, "a": batch.a, "s_next": batch.s_next,
        "xi": batch.xi, "xi_next": batch.xi_next,
        "H0": batch.em.H0, "R": batch.em.R,
    }
    if batch.has_pairs:
        arrays["xi_tilde"] = batch.xi_tilde
        arrays["xi_tilde_next"] = batch.xi_tilde_next
    container.write(path, {"kind": "linear_dataset", "env": cfg, "alpha": batch.em.alpha}, arrays)


def load(path) -> TransitionBatch:
    meta, arr = container.read(path)
    if meta.get("kind") != "linear_dataset":
        raise container.ContainerError(f"{path} is not a linear dataset")
    em = EmissionSet(arr["H0"], arr["R"], float(meta["alpha"]))
    cfg = LinearEnvConfig.from_dict(meta["env"]) if meta.get("env") else None
    return TransitionBatch(
        arr["s"], arr["a"], arr["s_next"], arr["xi"], arr["xi_next"], em,
        arr.get("xi_tilde"), arr.get("xi_tilde_next"), cfg,
    )


def export_csv(batch: TransitionBatch, path, limit: int | None = None) -> None:
    """Inspection dump: states, actions, exogenous indices and q/eps energies."""
    b = batch if limit is None else batch.take(slice(0, limit))
    d = b.s.shape[1]
    header = ([f"s{j}" for j in range(d)] + [f"a{j}" for j in range(d)]
              + [f"s_next{j}" for j in range(d)]
              + ["xi", "xi_next", "xi_tilde", "xi_tilde_next", "q_sq", "eps_sq"])
    q2, e2 = q_sq_norms(b), eps_sq_norms(b)
    xt = b.xi_tilde if b.has_pairs else np.full(len(b), -1)
    xtn = b.xi_tilde_next if b.has_pairs else np.full(len(b), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(b)):
            w.writerow([*(f"{v:.17g}" for v in b.s[i]), *(f"{v:.17g}" for v in b.a[i]),
                        *(f"{v:.17g}" for v in b.s_next[i]),
                        int(b.xi[i]), int(b.xi_next[i]), int(xt[i]), int(xtn[i]),
                        f"{q2[i]:.17g}", f"{e2[i]:.17g}"])


def with_overrides(cfg: LinearEnvConfig, **kw) -> LinearEnvConfig:
    return replace(cfg, **kw).validate()
