"""Run every (config, seed) job of a sweep and aggregate the results."""
from __future__ import annotations

import hashlib
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

from .config import SweepSpec, experiment_hash, run_seed
from .jobs import run_job
from .store import Store, aggregate_csv, make_row

log = logging.getLogger(__name__)


@dataclass
class Job:
    index: int
    cfg: dict
    overrides: dict
    seed: int
    run_seed: int

    @property
    def key(self) -> str:
        return f"{experiment_hash(self.cfg)}_{self.run_seed}"


def plan(spec: SweepSpec) -> list[Job]:
    jobs = []
    for cfg, ov in spec.points():
        for s in cfg["seeds"]:
            jobs.append(Job(len(jobs), cfg, ov, s, run_seed(spec.master_seed, s)))
    return jobs


def code_fingerprint() -> str:
    """Hash of the package sources; part of every cache key."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class JobCache:
    """Metrics of finished jobs keyed by (code, config hash, run seed)."""

    def __init__(self, root):
        self.root = Path(root) / code_fingerprint()
        self.root.mkdir(parents=True, exist_ok=True)

    def get(self, job: Job) -> dict | None:
        p = self.root / f"{job.key}.json"
        if p.exists():
            with open(p) as fh:
                return json.load(fh)
        return None

    def put(self, job: Job, metrics: dict) -> None:
        tmp = self.root / f"{job.key}.json.tmp"
        tmp.write_text(json.dumps(metrics, sort_keys=True))
        tmp.replace(self.root / f"{job.key}.json")


def _execute(cfg: dict, seed: int):
    try:
        return run_job(cfg, seed), ""
    except Exception as exc:  # failures become rows, the sweep keeps going
        return None, f"{type(exc).__name__}: {exc} | {traceback.format_exc(limit=3)!r}"


@dataclass
class SweepResult:
    rows: list
    aggregate: str
    n_failed: int


def run_sweep(spec: SweepSpec, out, jobs: int = 1, cache=None, echo=print) -> SweepResult:
    """Execute ``spec`` into the store at ``out``.

    Workers never write; completed rows are appended by this process in
    completion order. The aggregate CSV is built from the rows sorted by
    (config hash, seed) so it does not depend on ``jobs`` or timing.
    """
    store = Store(out)
    work = plan(spec)
    sizes = " x ".join(str(len(v)) for _, v in spec.axes) or "1"
    echo(f"{spec.name}: {sizes} points x {len(spec.seeds)} seeds = {len(work)} runs")
    for cfg, _ in spec.points():
        store.save_config(cfg)
    (Path(out) / "sweep.json").write_text(json.dumps(
        {"name": spec.name, "base": spec.base, "axes": [{"path": p, "values": v} for p, v in spec.axes],
         "master_seed": spec.master_seed}, indent=2, sort_keys=True) + "\n")
    jc = JobCache(cache) if cache else None
    rows = []
    pending = []
    for job in work:
        hit = jc.get(job) if jc else None
        if hit is not None:
            row = make_row(job.cfg, job.overrides, job.seed, job.run_seed, hit)
            store.append(row)
            rows.append(row)
        else:
            pending.append(job)

    def finish(job, metrics, err):
        if metrics is not None and jc:
            jc.put(job, metrics)
        row = make_row(job.cfg, job.overrides, job.seed, job.run_seed, metrics, err)
        store.append(row)
        rows.append(row)
        status = "ok" if metrics is not None else f"FAILED {err.split(' | ')[0]}"
        echo(f"  [{len(rows)}/{len(work)}] {job.overrides} seed={job.seed}: {status}")

    if jobs <= 1 or len(pending) <= 1:
        for job in pending:
            finish(job, *_execute(job.cfg, job.run_seed))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {pool.submit(_execute, j.cfg, j.run_seed): j for j in pending}
            for f in as_completed(futs):
                finish(futs[f], *f.result())
    text = aggregate_csv(rows)
    store.aggregate_path.write_text(text)
    n_failed = sum(r["status"] != "ok" for r in rows)
    return SweepResult(rows, text, n_failed)
