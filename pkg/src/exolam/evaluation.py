"""Probes and latent-quality metrics.

Metric names used in CSV/JSON output come from :data:`METRICS`; anything
else is rejected when building a :class:`MetricsRecord`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .exbmdp import TransitionBatch, render
from .linear_lam import LinearLamParams, idm, loss_lam
from .numerics import RngStream, ridge_solve

STREAM_PROBE_SPLIT = 21
STREAM_ANCHORS = 22

METRICS = {
    "loss_lam": "reconstruction loss (mean squared error per row) at the logged step",
    "loss_total": "full training objective at the logged step",
    "loss_xexo": "cross-exogenous reconstruction loss",
    "loss_robust": "robust-target prediction loss",
    "loss_vq": "codebook + commitment loss (grid model)",
    "action_nmse": "held-out linear-probe NMSE of the true action from z",
    "var_xi_prime": "Var over xi' of z given (s, xi, a), normalized by E||z||^2",
    "var_xi_pair": "Var over (xi, xi') of z given (s, a), normalized by E||z||^2",
    "consistency_loss": "mean ||z_pre - z_tilde_pre||^2 over exogenous pairs",
    "code_disagreement": "fraction of pairs whose VQ codes differ",
    "exo_region_mse": "pixel MSE of the predicted next frame on the exogenous row",
    "recon_mse": "pixel MSE of the predicted next frame (grid model)",
    "codes_used": "number of distinct VQ codes used on the evaluation set",
    "eta_hat": "max over paired rows of ||y - y_tilde||^2 for the robust target",
    "wall_seconds": "wall-clock seconds of the run",
}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class MetricsRecord:
    config_hash: str
    seed: int
    step: int
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise KeyError(f"unregistered metric {self.metric!r}")
        if not np.isfinite(self.value):
            raise ValueError(f"metric {self.metric} is not finite: {self.value}")


# ---------------------------------------------------------------- probes


@dataclass(frozen=True)
class ProbeParams:
    M: np.ndarray
    b: np.ndarray

    def predict(self, z: np.ndarray) -> np.ndarray:
        return z @ self.M.T + self.b


def fit_probe(z: np.ndarray, a: np.ndarray, lambda_ridge: float = 1e-6) -> ProbeParams:
    """Closed-form ridge probe a_hat = M z + b on centered data."""
    if z.shape[0] < z.shape[1] + 1:
        raise ValueError(f"need at least d_z + 1 = {z.shape[1] + 1} samples, got {z.shape[0]}")
    zm, am = z.mean(axis=0), a.mean(axis=0)
    M = ridge_solve(z - zm, a - am, lambda_ridge).T
    return ProbeParams(M, am - M @ zm)


def nmse(probe: ProbeParams, z: np.ndarray, a: np.ndarray) -> float:
    denom = np.mean(np.sum((a - a.mean(axis=0)) ** 2, axis=1))
    if denom <= 0:
        raise ValueError("held-out actions have zero variance")
    err = np.mean(np.sum((a - probe.predict(z)) ** 2, axis=1))
    return float(err / denom)


def probe_nmse(z: np.ndarray, a: np.ndarray, rng: RngStream,
               lambda_ridge: float = 1e-6, train_frac: float = 0.8) -> float:
    """Fit on a random 80% split, report NMSE on the remaining 20%."""
    perm = rng.permutation(z.shape[0])
    cut = int(round(train_frac * z.shape[0]))
    tr, te = perm[:cut], perm[cut:]
    return nmse(fit_probe(z[tr], a[tr], lambda_ridge), z[te], a[te])


def latents(p: LinearLamParams, batch: TransitionBatch) -> np.ndarray:
    return np.concatenate([idm(p, c.o, c.o_next) for c in batch.chunks()])


def action_nmse(p: LinearLamParams, batch: TransitionBatch, seed: int = 0,
                lambda_ridge: float = 1e-6) -> float:
    return probe_nmse(latents(p, batch), batch.a, RngStream(seed, STREAM_PROBE_SPLIT), lambda_ridge)


# ---------------------------------------------------------------- counterfactual variance


def _kernel(xi: np.ndarray, p_switch: float, n_xi: int, rng: RngStream) -> np.ndarray:
    u = rng.uniform(xi.shape)
    off = rng.integers(1, max(n_xi, 2), size=xi.shape)
    if n_xi == 1:
        return xi.copy()
    return np.where(u < p_switch, (xi + off) % n_xi, xi)


def _normalized_variance(z: np.ndarray) -> float:
    """z is (anchors, draws, d_z): mean per-anchor trace covariance / mean ||z||^2."""
    denom = float(np.mean(np.sum(z ** 2, axis=-1)))
    if denom == 0.0:
        return 0.0
    # shifting by the first draw keeps identical draws at exactly zero variance
    tr = np.sum(np.var(z - z[:, :1], axis=1, ddof=1), axis=-1)
    return float(tr.mean() / denom)


def var_xi_prime(p: LinearLamParams, batch: TransitionBatch, p_switch: float | None = None,
                 n_anchors: int = 512, n_draws: int = 16, seed: int = 0) -> float:
    """Spread of z over counterfactual next exogenous states.

    Anchors ``(s, xi, a, s')`` come from ``batch``; each gets ``n_draws``
    fresh ``xi'`` from the switching kernel and is re-rendered.
    """
    p_switch = batch.cfg.p_switch if p_switch is None else p_switch
    rng = RngStream(seed, STREAM_ANCHORS)
    idx = rng.integers(0, len(batch), size=n_anchors)
    s, s2, xi = batch.s[idx], batch.s_next[idx], batch.xi[idx]
    o = render(s, xi, batch.em)
    xi_rep = np.repeat(xi, n_draws)
    xi2 = _kernel(xi_rep, p_switch, batch.em.n_xi, rng)
    o2 = render(np.repeat(s2, n_draws, axis=0), xi2, batch.em)
    z = np.repeat(o @ p.C.T, n_draws, axis=0) + o2 @ p.D.T
    return _normalized_variance(z.reshape(n_anchors, n_draws, -1))


def var_xi_pair(p: LinearLamParams, batch: TransitionBatch, p_switch: float | None = None,
                n_anchors: int = 512, n_draws: int = 16, seed: int = 0) -> float:
    """Spread of z when both xi (uniform) and xi' (kernel) are resampled."""
    p_switch = batch.cfg.p_switch if p_switch is None else p_switch
    rng = RngStream(seed, STREAM_ANCHORS)
    idx = rng.integers(0, len(batch), size=n_anchors)
    n_xi = batch.em.n_xi
    xi = rng.integers(0, n_xi, size=n_anchors * n_draws)
    xi2 = _kernel(xi, p_switch, n_xi, rng)
    o = render(np.repeat(batch.s[idx], n_draws, axis=0), xi, batch.em)
    o2 = render(np.repeat(batch.s_next[idx], n_draws, axis=0), xi2, batch.em)
    z = o @ p.C.T + o2 @ p.D.T
    return _normalized_variance(z.reshape(n_anchors, n_draws, -1))


# ---------------------------------------------------------------- paired metrics


def consistency_loss(z: np.ndarray, z_tilde: np.ndarray,
                     codes: np.ndarray | None = None,
                     codes_tilde: np.ndarray | None = None) -> dict:
    """Mean ||z - z_tilde||^2 over pairs that share (s, a, s')."""
    out = {"consistency_loss": float(np.mean(np.sum((z - z_tilde) ** 2, axis=1)))}
    if codes is not None:
        out["code_disagreement"] = float(np.mean(codes != codes_tilde))
    return out


def linear_consistency(p: LinearLamParams, batch: TransitionBatch) -> float:
    z = latents(p, batch)
    zt = np.concatenate([idm(p, c.o_tilde, c.o_tilde_next) for c in batch.chunks()])
    return consistency_loss(z, zt)["consistency_loss"]


def exo_region_mse(pred_next: np.ndarray, true_next: np.ndarray, exo_row: int = 3) -> float:
    """Pixel MSE restricted to the exogenous row of (n, H, W) frames."""
    diff = pred_next[:, exo_row, :] - true_next[:, exo_row, :]
    return float(np.mean(diff.astype(np.float64) ** 2))


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def linear_metrics(p: LinearLamParams, batch: TransitionBatch, seed: int = 0,
                   lambda_ridge: float = 1e-6, n_anchors: int = 512, n_draws: int = 16) -> dict:
    """All end-of-run metrics for a linear model."""
    out = {
        "action_nmse": action_nmse(p, batch, seed, lambda_ridge),
        "var_xi_prime": var_xi_prime(p, batch, n_anchors=n_anchors, n_draws=n_draws, seed=seed),
        "var_xi_pair": var_xi_pair(p, batch, n_anchors=n_anchors, n_draws=n_draws, seed=seed),
    }
    if batch.has_pairs:
        out["consistency_loss"] = linear_consistency(p, batch.take(slice(0, 20000)))
    sample = batch.take(slice(0, 20000))
    out["loss_lam"] = loss_lam(p, sample)
    return out

