"""``exolam gen|train|sweep|verify|report``.

Exit codes: 0 success, 1 usage or config error, 2 run failure,
3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .. import exbmdp
from ..container import ContainerError
from ..grid import env as grid_env
from ..linear_lam import TrainingDiverged
from . import report as report_mod
from .config import (ConfigError, load_sweep, normalize_experiment, normalize_verify, read_json,
                     resolve_master_seed, run_seed, write_json)
from .jobs import load_checkpoint, run_grid, run_linear, save_checkpoint
from .store import Store, make_row
from .sweep import run_sweep
from .verify import any_failed, run_verify, summarize, table

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("exolam")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def cmd_gen(args) -> int:
    cfg = normalize_experiment(read_json(args.config))
    seed = run_seed(resolve_master_seed(args.seed), cfg["seeds"][0])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg["kind"] == "linear":
        env = exbmdp.LinearEnvConfig(**cfg["env"], seed=seed)
        batch = exbmdp.make_dataset(env)
        exbmdp.save(batch, out)
        stats = exbmdp.summary(batch)
    else:
        data = grid_env.generate_grid(grid_env.GridEnvConfig(**cfg["env"], seed=seed))
        grid_env.save(data, out)
        stats = {"rows": len(data), "sigma": cfg["env"]["sigma"],
                 "exo_row_mean": float(data.obs[:, grid_env.EXO_ROW].mean())}
    print(json.dumps({"dataset": str(out), "seed": seed, **stats}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        cfg, seed, step, params, adam = load_checkpoint(args.resume)
        if args.steps is not None:
            cfg["model"]["steps"] = args.steps
        jobs = [(cfg["seeds"][0] if cfg.get("seeds") else seed, seed, params, adam, step)]
    else:
        if not args.config:
            raise ConfigError("/", "train needs --config or --resume")
        cfg = normalize_experiment(read_json(args.config))
        if args.steps is not None:
            cfg["model"]["steps"] = args.steps
        master = resolve_master_seed(args.seed)
        jobs = [(s, run_seed(master, s), None, None, 0) for s in cfg["seeds"]]
    store = Store(args.out)
    h = store.save_config(cfg)
    runner = run_linear if cfg["kind"] == "linear" else run_grid
    failed = False
    for s, rs, init, adam, start in jobs:
        t0 = time.perf_counter()
        try:
            res, metrics = runner(cfg, rs, init=init, adam=adam, start_step=start)
        except TrainingDiverged as exc:
            store.append(make_row(cfg, {}, s, rs, None, str(exc)))
            print(f"seed {s}: training diverged: {exc}", file=sys.stderr)
            failed = True
            continue
        metrics = {k: float(v) for k, v in metrics.items()}
        metrics["wall_seconds"] = time.perf_counter() - t0
        ckpt = Path(args.out) / f"{h}_{rs}.ckpt"
        save_checkpoint(ckpt, cfg, rs, cfg["model"]["steps"], res.params, res.adam)
        store.append(make_row(cfg, {}, s, rs, metrics))
        first, last = (res.history[0], res.history[-1]) if res.history else (None, None)
        print(json.dumps({"checkpoint": str(ckpt), "seed": s, "run_seed": rs,
                          "first_log": first, "last_log": last, **metrics}, sort_keys=True,
                         default=float))
    store.write_aggregate()
    return EXIT_RUN if failed else EXIT_OK


def cmd_sweep(args) -> int:
    spec = load_sweep(read_json(args.config), args.seed)
    res = run_sweep(spec, args.out, jobs=args.jobs, cache=args.cache)
    print(f"aggregate: {Path(args.out) / 'aggregate.csv'} ({res.n_failed} failed runs)")
    return EXIT_RUN if res.n_failed else EXIT_OK


def cmd_verify(args) -> int:
    cfg = normalize_verify(read_json(args.config))
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    reports = run_verify(cfg, echo=lambda line: log.info(line))
    print(table(reports))
    if args.out:
        write_json(args.out, {"config": cfg, "summary": summarize(reports),
                              "reports": [r.to_dict() for r in reports]})
    return EXIT_VERIFY if any_failed(reports) else EXIT_OK


def cmd_report(args) -> int:
    store = Store(args.store)
    try:
        points = report_mod.build(args.figure, store.rows())
    except report_mod.MissingData as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUN
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.figure}.csv").write_text(report_mod.tidy_csv(args.figure, points))
    (out / f"{args.figure}.svg").write_text(report_mod.svg_plot(points, args.figure))
    print(f"wrote {out / (args.figure + '.csv')} and {out / (args.figure + '.svg')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="exolam", description="Latent action models under exogenous noise.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a dataset container")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model per seed and store checkpoints")
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="results store directory")
    t.add_argument("--seed", type=int, help="master seed")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="override the total step count")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a sweep spec")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, help="master seed (overrides EXOLAM_SEED)")
    s.add_argument("--cache", help="directory of finished-job results to reuse")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the theory checks")
    v.add_argument("--config", required=True)
    v.add_argument("--out", help="JSON report bundle")
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="trend CSV and SVG for a figure id")
    r.add_argument("--store", required=True)
    r.add_argument("--figure", required=True, choices=report_mod.FIGURES)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
