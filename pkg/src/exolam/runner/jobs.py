"""One (config, seed) job: generate data, train, evaluate.

Jobs are plain functions of their arguments so they can run in worker
processes; nothing here touches the results store.
"""
from __future__ import annotations

import time

import numpy as np

from .. import container, evaluation, exbmdp, linear_lam
from ..grid import env as grid_env
from ..grid import train as grid_train
from ..grid.model import GridLamParams, GridModelConfig
from ..numerics import AdamState
from .config import grid_objects, linear_objects

EVAL_ROWS = 20000


def linear_final_metrics(params, batch, tcfg, ev: dict, seed: int) -> dict:
    m = evaluation.linear_metrics(params, batch, seed=seed, lambda_ridge=ev["lambda_ridge"],
                                  n_anchors=ev["n_anchors"], n_draws=ev["n_draws"])
    sample = batch.take(slice(0, EVAL_ROWS))
    m["loss_total"] = linear_lam.objective(params, sample, tcfg)
    if tcfg.lambda_xexo > 0:
        m["loss_xexo"] = linear_lam.loss_xexo(params, sample)
    if tcfg.uses_robust:
        m["loss_robust"] = linear_lam.loss_robust(params, sample, tcfg.robust_target)
        y = linear_lam.robust_target(sample, tcfg.robust_target)
        yt = linear_lam.robust_target(sample, tcfg.robust_target, paired=True)
        m["eta_hat"] = float(np.max(np.sum((y - yt) ** 2, axis=1)))
    return m


def run_linear(cfg: dict, seed: int, init=None, adam=None, start_step: int = 0):
    env, tcfg = linear_objects(cfg, seed)
    batch = exbmdp.make_dataset(env)
    res = linear_lam.train(tcfg, batch, init=init, adam=adam, start_step=start_step)
    return res, linear_final_metrics(res.params, batch, tcfg, cfg["eval"], seed)


def run_grid(cfg: dict, seed: int, init=None, adam=None, start_step: int = 0):
    env, tcfg = grid_objects(cfg, seed)
    data = grid_env.generate_grid(env)
    held_out = grid_env.eval_data(env, cfg["eval"]["n_eval"])
    res = grid_train.train_grid(tcfg, data, init=init, adam=adam, start_step=start_step)
    m = grid_train.grid_metrics(res.params, held_out)
    if res.history:
        last = res.history[-1]
        for k in ("loss_total", "loss_lam", "loss_vq", "loss_xexo", "loss_robust"):
            if k in last:
                m[k] = last[k]
    return res, m


def run_job(cfg: dict, seed: int) -> dict:
    """Train and evaluate; returns registry metrics plus wall_seconds."""
    t0 = time.perf_counter()
    _, m = (run_linear if cfg["kind"] == "linear" else run_grid)(cfg, seed)
    m = {k: float(v) for k, v in m.items()}
    m["wall_seconds"] = time.perf_counter() - t0
    return m


# ---------------------------------------------------------------- checkpoints


def _adam_arrays(adam: AdamState | None, names) -> dict:
    if adam is None or not adam.m:
        return {}
    out = {}
    for n, m, v in zip(names, adam.m, adam.v):
        out[f"adam_m/{n}"] = m
        out[f"adam_v/{n}"] = v
    return out


def _adam_meta(adam: AdamState | None) -> dict:
    if adam is None:
        return {}
    return {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
            "step": adam.step}


def save_checkpoint(path, cfg: dict, seed: int, step: int, params, adam: AdamState | None) -> None:
    if cfg["kind"] == "linear":
        names = params.names()
        arrays = dict(zip(names, params.arrays()))
    else:
        names = params.names()
        arrays = dict(params.arrays)
    arrays.update(_adam_arrays(adam, names))
    meta = {"kind": f"{cfg['kind']}_checkpoint", "experiment": cfg, "seed": int(seed),
            "step": int(step), "adam": _adam_meta(adam), "param_names": names}
    container.write(path, meta, arrays)


def load_checkpoint(path):
    """Returns (experiment config, seed, step, params, adam state)."""
    meta, arrays = container.read(path)
    kind = meta.get("kind", "")
    if kind not in ("linear_checkpoint", "grid_checkpoint"):
        raise container.ContainerError(f"{path} is not a checkpoint (kind={kind!r})")
    names = meta["param_names"]
    cfg = meta["experiment"]
    if kind == "linear_checkpoint":
        params = linear_lam.LinearLamParams(**{n: arrays[n] for n in names})
    else:
        params = GridLamParams(GridModelConfig.from_dict(cfg["model"]["arch"]),
                               {n: arrays[n] for n in names})
    adam = None
    if meta.get("adam"):
        a = meta["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                         step=a["step"])
        if f"adam_m/{names[0]}" in arrays:
            adam.m = [arrays[f"adam_m/{n}"] for n in names]
            adam.v = [arrays[f"adam_v/{n}"] for n in names]
    return cfg, meta["seed"], meta["step"], params, adam
