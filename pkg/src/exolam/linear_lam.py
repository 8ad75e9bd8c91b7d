"""Linear latent action model.

IDM ``z = C o + D o'`` and FDM ``o_hat' = A o + B z``, trained with the
reconstruction loss plus optional cross-exogenous and robust-target terms.
All gradients are analytic; the losses are quadratic so no tape is needed.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .exbmdp import TransitionBatch
from .numerics import AdamState, RngStream, adam_step

log = logging.getLogger(__name__)

STREAM_INIT = 11
STREAM_MINIBATCH = 12

PARAM_NAMES = ("A", "B", "C", "D", "W")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LinearLamParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    W: np.ndarray | None = None

    def __post_init__(self):
        d_o, d_z = self.B.shape
        if self.A.shape != (d_o, d_o) or self.C.shape != (d_z, d_o) or self.D.shape != (d_z, d_o):
            raise ValueError("inconsistent parameter shapes")
        if self.W is not None and self.W.shape[1] != d_z:
            raise ValueError(f"W has {self.W.shape[1]} columns, expected d_z={d_z}")

    @property
    def d_z(self) -> int:
        return self.B.shape[1]

    @property
    def d_o(self) -> int:
        return self.A.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES if getattr(self, n) is not None]

    def names(self) -> list[str]:
        return [n for n in PARAM_NAMES if getattr(self, n) is not None]

    def replace_arrays(self, arrays) -> "LinearLamParams":
        vals = {n: getattr(self, n) for n in PARAM_NAMES}
        vals.update(zip(self.names(), arrays))
        return LinearLamParams(**vals)

    def copy(self) -> "LinearLamParams":
        return self.replace_arrays([x.copy() for x in self.arrays()])

    def finite(self) -> bool:
        return all(np.all(np.isfinite(x)) for x in self.arrays())


def init_params(d_o: int, d_z: int, rng: RngStream, d_y: int | None = None) -> LinearLamParams:
    """A, C, D ~ N(0, 1/d_o); B, W ~ N(0, 1/d_z)."""
    if d_z >= d_o:
        raise ValueError(f"d_z ({d_z}) must be smaller than d_o ({d_o})")
    so, sz = 1.0 / np.sqrt(d_o), 1.0 / np.sqrt(d_z)
    A = rng.normal((d_o, d_o), so)
    B = rng.normal((d_o, d_z), sz)
    C = rng.normal((d_z, d_o), so)
    D = rng.normal((d_z, d_o), so)
    W = rng.normal((d_y, d_z), sz) if d_y else None
    return LinearLamParams(A, B, C, D, W)


# ---------------------------------------------------------------- forward maps
# row convention: o is (n, d_o), z is (n, d_z)


def idm(p: LinearLamParams, o: np.ndarray, o_next: np.ndarray) -> np.ndarray:
    if o.shape[-1] != p.d_o or o_next.shape[-1] != p.d_o:
        raise ValueError(f"observation dim {o.shape[-1]}/{o_next.shape[-1]} != d_o={p.d_o}")
    return o @ p.C.T + o_next @ p.D.T


def fdm(p: LinearLamParams, o: np.ndarray, z: np.ndarray) -> np.ndarray:
    if o.shape[-1] != p.d_o or z.shape[-1] != p.d_z:
        raise ValueError(f"fdm input dims ({o.shape[-1]}, {z.shape[-1]}) != ({p.d_o}, {p.d_z})")
    return o @ p.A.T + z @ p.B.T


def _mean_sq(r: np.ndarray) -> float:
    return float(np.einsum("ij,ij->", r, r) / r.shape[0])


def loss_lam(p: LinearLamParams, batch: TransitionBatch) -> float:
    o, o2 = batch.o, batch.o_next
    return _mean_sq(o2 - fdm(p, o, idm(p, o, o2)))


def loss_xexo(p: LinearLamParams, batch: TransitionBatch) -> float:
    if not batch.has_pairs:
        raise ValueError("cross-exogenous loss needs the paired stream; regenerate with pairs")
    z_t = idm(p, batch.o_tilde, batch.o_tilde_next)
    return _mean_sq(batch.o_next - fdm(p, batch.o, z_t))


def robust_target(batch: TransitionBatch, target: str, paired: bool = False) -> np.ndarray:
    if target == "action":
        return batch.a
    if target == "q":
        return batch.q_tilde if paired else batch.q
    raise ValueError(f"unknown robust target {target!r}")


def loss_robust(p: LinearLamParams, batch: TransitionBatch, target: str = "action") -> float:
    if p.W is None:
        raise ValueError("robust loss requires the W head")
    y = robust_target(batch, target)
    if p.W.shape[0] != y.shape[1]:
        raise ValueError(f"W rows {p.W.shape[0]} incompatible with target dim {y.shape[1]}")
    z = idm(p, batch.o, batch.o_next)
    return _mean_sq(y - z @ p.W.T)


# ---------------------------------------------------------------- training config


@dataclass(frozen=True)
class LinearTrainConfig:
    d_z: int = 8
    lr: float = 1e-3
    steps: int = 20000
    batch_size: int = 128
    lambda_xexo: float = 0.0
    lambda_robust: float = 0.0
    robust_target: str = "none"
    grad_clip: float | None = None
    seed: int = 0
    log_every: int = 1000

    def validate(self) -> "LinearTrainConfig":
        if self.robust_target not in ("action", "q", "none"):
            raise ValueError(f"robust_target must be action, q or none, got {self.robust_target!r}")
        if self.lambda_xexo < 0 or self.lambda_robust < 0:
            raise ValueError("lambda values must be nonnegative")
        if self.lambda_robust > 0 and self.robust_target == "none":
            raise ValueError("lambda_robust > 0 needs a robust_target")
        if self.steps < 0 or self.batch_size < 1 or self.d_z < 1:
            raise ValueError("steps, batch_size, d_z must be positive")
        return self

    @property
    def uses_robust(self) -> bool:
        return self.lambda_robust > 0 and self.robust_target != "none"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LinearTrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- gradients


def objective(p: LinearLamParams, batch: TransitionBatch, cfg: LinearTrainConfig) -> float:
    total = loss_lam(p, batch)
    if cfg.lambda_xexo > 0:
        total += cfg.lambda_xexo * loss_xexo(p, batch)
    if cfg.uses_robust:
        total += cfg.lambda_robust * loss_robust(p, batch, cfg.robust_target)
    return total


def grad_total(p: LinearLamParams, batch: TransitionBatch, cfg: LinearTrainConfig):
    """Loss value and gradients ordered like ``p.arrays()``."""
    o, o2 = batch.o, batch.o_next
    n = o.shape[0]
    z = idm(p, o, o2)
    r = fdm(p, o, z) - o2
    loss = _mean_sq(r)
    G = (2.0 / n) * r
    dA = G.T @ o
    dB = G.T @ z
    dz = G @ p.B
    dC = dz.T @ o
    dD = dz.T @ o2
    dW = None if p.W is None else np.zeros_like(p.W)

    if cfg.lambda_xexo > 0:
        ot, ot2 = batch.o_tilde, batch.o_tilde_next
        zt = idm(p, ot, ot2)
        r2 = fdm(p, o, zt) - o2
        loss += cfg.lambda_xexo * _mean_sq(r2)
        G2 = (2.0 * cfg.lambda_xexo / n) * r2
        dA += G2.T @ o
        dB += G2.T @ zt
        dzt = G2 @ p.B
        dC += dzt.T @ ot
        dD += dzt.T @ ot2

    if cfg.uses_robust:
        if p.W is None:
            raise ValueError("robust loss requires the W head")
        y = robust_target(batch, cfg.robust_target)
        e = z @ p.W.T - y
        loss += cfg.lambda_robust * _mean_sq(e)
        Ge = (2.0 * cfg.lambda_robust / n) * e
        dW = Ge.T @ z
        dzr = Ge @ p.W
        dC += dzr.T @ o
        dD += dzr.T @ o2

    grads = {"A": dA, "B": dB, "C": dC, "D": dD, "W": dW}
    return loss, [grads[k] for k in p.names()]


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: LinearLamParams
    history: list[tuple[int, float]] = field(default_factory=list)
    adam: AdamState | None = None


def train(cfg: LinearTrainConfig, data: TransitionBatch,
          init: LinearLamParams | None = None, adam: AdamState | None = None,
          start_step: int = 0, on_log=None) -> TrainResult:
    """Adam on minibatches sampled with replacement from ``data``.

    ``init``/``adam``/``start_step`` resume a run; since minibatch indices are
    drawn from a stream positioned by step count the continuation is
    identical to an uninterrupted run.
    """
    cfg.validate()
    if len(data) == 0:
        raise ValueError("empty dataset")
    d_o = data.em.H0.shape[0]
    needed = ["o", "o_next"]
    if cfg.lambda_xexo > 0:
        needed += ["o_tilde", "o_tilde_next"]
    if cfg.uses_robust and cfg.robust_target == "q":
        needed.append("q")
    data.materialize(*needed)
    d_y = None
    if cfg.uses_robust:
        d_y = data.a.shape[1] if cfg.robust_target == "action" else d_o
    p = init if init is not None else init_params(d_o, cfg.d_z, RngStream(cfg.seed, STREAM_INIT), d_y)
    adam = adam or AdamState(lr=cfg.lr)
    names = p.names()
    history: list[tuple[int, float]] = []
    mb_rng = RngStream(cfg.seed, STREAM_MINIBATCH)
    for _ in range(start_step):
        mb_rng.integers(0, len(data), size=cfg.batch_size)

    for step in range(start_step, cfg.steps):
        idx = mb_rng.integers(0, len(data), size=cfg.batch_size)
        loss, grads = grad_total(p, data.take(idx), cfg)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}; config={cfg.to_dict()}")
        new, adam = adam_step(p.arrays(), grads, adam, cfg.grad_clip, names)
        p = p.replace_arrays(new)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append((step, loss))
            if on_log:
                on_log(step, loss)
            log.debug("step %d loss %.6g", step, loss)
    return TrainResult(p, history, adam)


def do_nothing_loss(batch: TransitionBatch) -> float:
    """Loss of A = I, B = 0: mean ||q + eps||^2."""
    return _mean_sq(batch.o_next - batch.o)


def with_overrides(cfg: LinearTrainConfig, **kw) -> LinearTrainConfig:
    return replace(cfg, **kw).validate()
