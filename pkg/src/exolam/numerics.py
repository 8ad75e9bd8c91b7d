"""Dense linear algebra, Adam, seeded randomness and gradient checking.

Matrices are plain float64 numpy arrays. Everything here is a pure function
of its inputs except :class:`RngStream`, which owns a generator state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NumericalError(RuntimeError):
    pass


class RngStream:
    """Philox-4x64 counter-based stream keyed by ``(seed, stream_id)``.

    The key is ``seed | stream_id << 64`` so every (seed, stream_id) pair maps
    to a distinct 128-bit Philox key. Gaussians come from numpy's ziggurat
    transform, which is deterministic for a fixed numpy release.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = self.seed | (self.stream_id << 64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.gen.standard_normal(size) * scale

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def spawn(self, stream_id: int) -> "RngStream":
        """Independent stream sharing this seed."""
        return RngStream(self.seed, stream_id)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


# ---------------------------------------------------------------- SVD


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def svd(m: np.ndarray) -> SvdResult:
    """Thin SVD with the sign of each left singular vector fixed so that its
    largest-magnitude entry is positive (the paired right vector flips too)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"svd expects a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"svd input {m.shape[0]}x{m.shape[1]} has non-finite entries")
    try:
        U, S, Vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"svd did not converge for {m.shape[0]}x{m.shape[1]} matrix"
        ) from exc
    V = Vt.T
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return SvdResult(U * signs, S, V * signs)


def truncated(res: SvdResult, rank: int) -> np.ndarray:
    """Best rank-``rank`` approximation in Frobenius norm."""
    return (res.U[:, :rank] * res.S[:rank]) @ res.V[:, :rank].T


# ---------------------------------------------------------------- ridge


def ridge_solve(X: np.ndarray, Y: np.ndarray, lambda_ridge: float = 1e-6) -> np.ndarray:
    """argmin_B ||Y - X B||^2 + lambda ||B||^2 via the normal equations."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 1 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"row mismatch: X {X.shape}, Y {Y.shape}")
    if lambda_ridge < 0:
        raise ValueError("lambda_ridge must be nonnegative")
    p = X.shape[1]
    gram = X.T @ X + lambda_ridge * np.eye(p)
    if lambda_ridge == 0:
        rank = np.linalg.matrix_rank(gram)
        if rank < p:
            raise NumericalError(f"X^T X is rank deficient ({rank} < {p}) at lambda=0")
    return np.linalg.solve(gram, X.T @ Y)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    grad_clip: float | None = None,
    names: Sequence[str] | None = None,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated.

    ``state`` is updated in place and also returned for convenience.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    names = names or [f"param[{i}]" for i in range(len(params))]
    for n, p, g in zip(names, params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {n} shape {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for n, p, m in zip(names, params, state.m):
        if m.shape != p.shape:
            raise ValueError(f"Adam accumulator shape {m.shape} does not match {n} shape {p.shape}")

    if grad_clip is not None:
        norm = global_norm(grads)
        if norm > grad_clip:
            grads = [g * (grad_clip / (norm + 1e-12)) for g in grads]

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.lr / bc1
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        out.append(p - (step_size * m / denom).astype(p.dtype, copy=False))
    return out, state


# ---------------------------------------------------------------- gradient check


def finite_diff_grad(
    loss_fn: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central differences, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    work = [np.array(p, dtype=np.float64, copy=True) for p in params]
    grads = []
    for k, p in enumerate(work):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(work)
            flat[i] = orig - h
            down = loss_fn(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    num = np.linalg.norm(np.asarray(a) - np.asarray(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(num / den)


# ---------------------------------------------------------------- whitening


def covariance(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    return xc.T @ xc / x.shape[0]


def inv_sqrt_psd(cov: np.ndarray, eps_reg: float = 1e-8) -> np.ndarray:
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < -1e-10:
        raise NumericalError(f"covariance has negative eigenvalue {evals.min():.3e}")
    evals = np.clip(evals, 0.0, None) + eps_reg
    return (evecs / np.sqrt(evals)) @ evecs.T


def whiten(samples: np.ndarray, eps_reg: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Mean-subtract and map through (Sigma + eps I)^{-1/2}.

    Returns ``(whitened, transform)``; rows of ``whitened`` are
    ``(x - mean) @ transform`` (the transform is symmetric).
    """
    if eps_reg <= 0:
        raise ValueError("eps_reg must be positive")
    x = np.asarray(samples, dtype=np.float64)
    T = inv_sqrt_psd(covariance(x), eps_reg)
    return (x - x.mean(axis=0)) @ T, T
