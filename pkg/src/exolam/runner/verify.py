"""Run the registered theory checks described by a verify config."""
from __future__ import annotations

import logging

import numpy as np

from .. import exbmdp, linear_lam, oracles
from ..exbmdp import LinearEnvConfig
from ..numerics import whiten
from ..oracles import PropReport

log = logging.getLogger(__name__)

FAILING = ("fail", "non-unique")


def check_noise(cfg: dict) -> list[PropReport]:
    out = []
    for s in cfg["seeds"]:
        env = LinearEnvConfig(**{**cfg["env"], "n_traj": cfg["noise"]["n_traj"]}, seed=s)
        rep = oracles.verify_noise_decomposition(exbmdp.make_dataset(env))
        rep.prop_id = f"noise[seed={s}]"
        out.append(rep)
    return out


def _worst(reports: list[PropReport], prop_id: str) -> PropReport:
    worst = min(reports, key=lambda r: r.margin)
    passed = all(r.passed for r in reports)
    status = "degenerate" if passed and all(r.lhs == 0.0 for r in reports) else ""
    extra = dict(worst.extra)
    extra.update(n_cases=len(reports), n_failed=sum(not r.passed for r in reports),
                 min_margin=worst.margin)
    return PropReport(prop_id, worst.lhs, worst.rhs, worst.margin, passed, status,
                      worst.inputs, sum(r.n_samples for r in reports), extra)


def check_prop3(cfg: dict, loss_fn=None) -> list[PropReport]:
    """Random parameter draws plus models trained with the robust loss."""
    c = cfg["prop3"]
    env = LinearEnvConfig(**{**cfg["env"], "n_traj": c["n_traj"]}, seed=cfg["seeds"][0])
    batch = exbmdp.make_dataset(env)
    d_z = min(8, env.d_o - 1)
    out = []
    for target in c["targets"]:
        d_y = env.d_a if target == "action" else env.d_o
        reps = []
        for i in range(c["draws"]):
            p = oracles.random_params(env.d_o, d_z, d_y, seed=i, scale=float(1 + i % 4))
            reps.append(oracles.verify_prop3(p, batch, target, loss_fn=loss_fn))
        for s in cfg["seeds"]:
            tcfg = linear_lam.LinearTrainConfig(d_z=d_z, steps=c["train_steps"], seed=s, lambda_robust=1.0,
                                                robust_target=target, log_every=10**9)
            trained = linear_lam.train(tcfg, batch).params
            reps.append(oracles.verify_prop3(trained, batch, target, loss_fn=loss_fn))
        out.append(_worst(reps, f"prop3[{target}]"))
    return out


def check_prop2(cfg: dict) -> list[PropReport]:
    c = cfg["prop2"]
    out = []
    for s in cfg["seeds"]:
        u, ut, rho = oracles.latent_shared_pair(c["n"], c["dim"], c["rho"], s)
        u, _ = whiten(u)
        ut, _ = whiten(ut)
        params, _ = oracles.train_cross_exo_reduced(u, ut, c["d_z"], seed=s, steps=c["steps"], lr=c["lr"])
        rep = oracles.verify_prop2(params, u, ut, c["d_z"], rho_expected=rho)
        rep.prop_id = f"prop2[seed={s}]"
        out.append(rep)
    return out


def check_prop1(cfg: dict) -> list[PropReport]:
    c = cfg["prop1"]
    env = LinearEnvConfig(**cfg["env"], seed=cfg["seeds"][0])
    rep = oracles.verify_prop1(env, d_z=c["d_z"], n_rows=c["n_rows"], p_grid=c["p_grid"],
                               restarts=c["restarts"], seed=cfg["seeds"][0],
                               max_steps=c["max_steps"], lr=c["lr"])
    return [rep]


CHECKS = {"noise": check_noise, "prop3": check_prop3, "prop2": check_prop2, "prop1": check_prop1}


def run_verify(cfg: dict, echo=print) -> list[PropReport]:
    reports = []
    for name in cfg["checks"]:
        got = CHECKS[name](cfg)
        for r in got:
            echo(r.line())
        reports.extend(got)
    return reports


def any_failed(reports) -> bool:
    return any(r.status in FAILING for r in reports)


def table(reports) -> str:
    head = f"{'check':<18} {'status':<12} {'lhs':>14} {'rhs':>14} {'margin':>14}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.prop_id:<18} {r.status:<12} {r.lhs:>14.6g} {r.rhs:>14.6g} {r.margin:>14.6g}")
    return "\n".join(lines)


def summarize(reports) -> dict:
    return {"passed": not any_failed(reports), "n_checks": len(reports),
            "statuses": {r.prop_id: r.status for r in reports},
            "max_lhs": float(np.max([r.lhs for r in reports])) if reports else 0.0}
