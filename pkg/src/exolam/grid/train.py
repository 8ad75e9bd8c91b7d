"""Losses and Adam training loop for the grid-world LAM."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import evaluation
from ..linear_lam import TrainingDiverged
from ..numerics import AdamState, RngStream, adam_step
from .env import EXO_ROW, GridData
from .model import DTYPE, Graph, GridLamParams, GridModelConfig, init_grid_params, predict, encode_all
from .tape import Tape

log = logging.getLogger(__name__)

STREAM_INIT = 41
STREAM_MINIBATCH = 42
STREAM_LABELS = 43


@dataclass(frozen=True)
class GridTrainConfig:
    steps: int = 16000
    batch_size: int = 128
    lr: float = 3e-4
    grad_clip: float = 5.0
    lambda_xexo: float = 0.0
    lambda_act: float = 0.0
    label_fraction: float = 0.01
    seed: int = 0
    log_every: int = 500
    model: GridModelConfig = field(default_factory=GridModelConfig)

    @property
    def variant(self) -> str:
        if self.lambda_xexo > 0 and self.lambda_act > 0:
            return "xexo+robust"
        if self.lambda_xexo > 0:
            return "xexo"
        if self.lambda_act > 0:
            return "robust"
        return "vanilla"

    def validate(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lambda_xexo < 0 or self.lambda_act < 0:
            raise ValueError("lambda values must be nonnegative")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must be in (0, 1]")
        return self

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "model" in kw and isinstance(kw["model"], dict):
            kw["model"] = GridModelConfig.from_dict(kw["model"])
        return cls(**kw)


def labeled_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    k = max(1, int(round(fraction * n)))
    return np.sort(RngStream(seed, STREAM_LABELS).permutation(n)[:k])


def grid_losses(g: Graph, batch: GridData, cfg: GridTrainConfig,
                labeled: GridData | None = None):
    """Build the objective on ``g``'s tape.

    Returns ``(total_node, parts)`` where ``parts`` maps loss names to nodes.
    ``labeled`` carries the action-labeled rows for the robust term.
    """
    t = g.tape
    z_pre, z_q, z_code, _ = g.encode(batch.obs, batch.obs_next)
    pred = g.decode(batch.obs, z_q)
    parts = {
        "loss_lam": t.mse(pred, t.const(batch.obs_next.astype(DTYPE))),
        "loss_vq": g.vq_loss(z_pre, z_code),
    }
    total = t.add(parts["loss_lam"], parts["loss_vq"])
    if cfg.lambda_xexo > 0:
        zt_pre, zt_q, zt_code, _ = g.encode(batch.obs_tilde, batch.obs_tilde_next)
        pred_x = g.decode(batch.obs, zt_q)
        parts["loss_xexo"] = t.mse(pred_x, t.const(batch.obs_next.astype(DTYPE)))
        total = t.add(total, t.scale(parts["loss_xexo"], cfg.lambda_xexo))
        total = t.add(total, g.vq_loss(zt_pre, zt_code))
    if cfg.lambda_act > 0:
        if labeled is None or len(labeled) == 0:
            raise ValueError("robust loss requested but no action-labeled rows are available")
        zl_pre, _, _, _ = g.encode(labeled.obs, labeled.obs_next)
        parts["loss_robust"] = g.robust_loss(zl_pre, labeled.action)
        total = t.add(total, t.scale(parts["loss_robust"], cfg.lambda_act))
    return total, parts


@dataclass
class GridTrainResult:
    params: GridLamParams
    history: list = field(default_factory=list)
    adam: AdamState | None = None


def train_grid(cfg: GridTrainConfig, data: GridData, init: GridLamParams | None = None,
               eval_set: GridData | None = None, on_log=None, adam: AdamState | None = None,
               start_step: int = 0) -> GridTrainResult:
    """Adam on minibatches drawn with replacement; ``init``/``adam``/``start_step``
    resume a run exactly (the minibatch stream is replayed up to ``start_step``)."""
    cfg.validate()
    if len(data) == 0:
        raise ValueError("empty dataset")
    p = init if init is not None else init_grid_params(cfg.model, RngStream(cfg.seed, STREAM_INIT))
    adam = adam or AdamState(lr=cfg.lr)
    rng = RngStream(cfg.seed, STREAM_MINIBATCH)
    lab_idx = labeled_indices(len(data), cfg.label_fraction, cfg.seed)
    n_lab = min(cfg.batch_size, len(lab_idx))
    for _ in range(start_step):
        rng.integers(0, len(data), size=cfg.batch_size)
        rng.integers(0, len(lab_idx), size=n_lab)
    labeled_all = data.take(lab_idx)
    tape = Tape()
    history = []
    names = p.names()
    sigma = data.cfg.sigma if data.cfg else None
    for step in range(start_step, cfg.steps):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        lidx = rng.integers(0, len(lab_idx), size=n_lab)
        g = Graph(p, tape)
        total, parts = grid_losses(g, data.take(idx), cfg, labeled_all.take(lidx))
        value = float(total.value)
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite grid loss at step {step} (sigma={sigma}); config={cfg.to_dict()}")
        tape.backward(total)
        grads = [g.p[k].grad if g.p[k].grad is not None else np.zeros_like(g.p[k].value)
                 for k in names]
        new, adam = adam_step(p.values(), grads, adam, cfg.grad_clip, names)
        p = p.with_values(new)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rec = {"step": step, "loss_total": value}
            rec.update({k: float(v.value) for k, v in parts.items()})
            if eval_set is not None:
                rec.update(grid_metrics(p, eval_set))
            history.append(rec)
            if on_log:
                on_log(rec)
            log.debug("grid step %d %s", step, rec)
    return GridTrainResult(p, history, adam)


def grid_metrics(p: GridLamParams, data: GridData) -> dict:
    """Exogenous-region MSE, consistency, reconstruction and code usage."""
    z, _, codes, pred = predict(p, data)
    zt, codes_t = encode_all(p, data.obs_tilde, data.obs_tilde_next)
    out = evaluation.consistency_loss(z.astype(np.float64), zt.astype(np.float64), codes, codes_t)
    out["exo_region_mse"] = evaluation.exo_region_mse(pred, data.obs_next, EXO_ROW)
    out["recon_mse"] = float(np.mean((pred.astype(np.float64) - data.obs_next) ** 2))
    out["codes_used"] = float(len(np.unique(codes)))
    return out


def timed_train(cfg: GridTrainConfig, data: GridData, eval_set: GridData):
    t0 = time.perf_counter()
    res = train_grid(cfg, data, eval_set=None)
    m = grid_metrics(res.params, eval_set)
    m["wall_seconds"] = time.perf_counter() - t0
    return res, m
