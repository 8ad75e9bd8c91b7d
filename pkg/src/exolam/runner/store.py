"""Results store: a directory of config files plus run and aggregate CSVs.

Layout::

    <store>/configs/<config_hash>.json   normalized experiment configs
    <store>/runs.csv                     one row per (config, seed), append-only
    <store>/aggregate.csv                mean and stderr per config, sorted by hash
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from ..evaluation import METRICS, mean_stderr
from .config import experiment_hash, variant_of, write_json

# wall-clock time is reported per run but never aggregated (it is not reproducible)
RUN_METRICS = [m for m in METRICS if m != "wall_seconds"]
KEY_COLUMNS = ["config_hash", "kind", "variant", "p_switch", "alpha", "sigma", "overrides"]
RUN_COLUMNS = KEY_COLUMNS + ["seed", "run_seed", "status"] + RUN_METRICS + ["wall_seconds", "error"]
AGG_COLUMNS = KEY_COLUMNS + ["n_seeds", "n_failed"] + [
    f"{m}_{s}" for m in RUN_METRICS for s in ("mean", "stderr")]


def fmt(v) -> str:
    """Floats with 17 significant digits; empty cell for missing or NaN."""
    if v is None or v == "":
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return "" if math.isnan(v) else format(v, ".17g")
    return str(v)


def key_fields(cfg: dict, overrides: dict) -> dict:
    env = cfg["env"]
    return {
        "config_hash": experiment_hash(cfg),
        "kind": cfg["kind"],
        "variant": variant_of(cfg),
        "p_switch": env.get("p_switch"),
        "alpha": env.get("alpha"),
        "sigma": env.get("sigma"),
        "overrides": json.dumps(overrides, sort_keys=True, separators=(",", ":")),
    }


def make_row(cfg: dict, overrides: dict, seed: int, rseed: int, metrics: dict | None,
             error: str = "") -> dict:
    row = key_fields(cfg, overrides)
    row.update(seed=int(seed), run_seed=int(rseed), status="ok" if metrics is not None else "failed",
               error=error)
    for k, v in (metrics or {}).items():
        if k not in METRICS:
            raise KeyError(f"unregistered metric {k!r}")
        row[k] = float(v)
    return row


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _parse(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


class Store:
    def __init__(self, root):
        self.root = Path(root)
        (self.root / "configs").mkdir(parents=True, exist_ok=True)

    @property
    def runs_path(self) -> Path:
        return self.root / "runs.csv"

    @property
    def aggregate_path(self) -> Path:
        return self.root / "aggregate.csv"

    def save_config(self, cfg: dict) -> str:
        h = experiment_hash(cfg)
        path = self.root / "configs" / f"{h}.json"
        if not path.exists():
            write_json(path, {k: v for k, v in cfg.items() if k not in ("seeds", "name")})
        return h

    def load_config(self, h: str) -> dict:
        with open(self.root / "configs" / f"{h}.json") as fh:
            return json.load(fh)

    def append(self, row: dict) -> None:
        """Single writer: called from the coordinating process only."""
        new = not self.runs_path.exists()
        with open(self.runs_path, "a", newline="") as fh:
            if new:
                fh.write(",".join(RUN_COLUMNS) + "\n")
            fh.write(_csv_text(RUN_COLUMNS, [row]).split("\n", 1)[1])

    def rows(self) -> list[dict]:
        if not self.runs_path.exists():
            return []
        with open(self.runs_path, newline="") as fh:
            return [{k: (v if k in ("config_hash", "overrides", "error") else _parse(v))
                     for k, v in r.items()} for r in csv.DictReader(fh)]

    def write_aggregate(self, rows: list[dict] | None = None) -> str:
        rows = self.rows() if rows is None else rows
        text = aggregate_csv(rows)
        self.aggregate_path.write_text(text)
        return text


def aggregate(rows: list[dict]) -> list[dict]:
    """Group by config hash (sorted), then seeds in order; mean and stderr.

    A (config, run seed) pair that appears more than once keeps its last row.
    """
    latest = {(r["config_hash"], int(r["run_seed"])): r for r in rows}
    rows = sorted(latest.values(), key=lambda r: (r["config_hash"], int(r["seed"])))
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["config_hash"], []).append(r)
    out = []
    for h in sorted(groups):
        g = groups[h]
        ok = [r for r in g if r["status"] == "ok"]
        agg = {c: g[0].get(c) for c in KEY_COLUMNS}
        agg["n_seeds"] = len(ok)
        agg["n_failed"] = len(g) - len(ok)
        for m in RUN_METRICS:
            vals = [r[m] for r in ok if r.get(m) is not None]
            if vals:
                agg[f"{m}_mean"], agg[f"{m}_stderr"] = mean_stderr(vals)
        out.append(agg)
    return out


def aggregate_csv(rows: list[dict]) -> str:
    return _csv_text(AGG_COLUMNS, aggregate(rows))


def runs_csv(rows: list[dict]) -> str:
    rows = sorted(rows, key=lambda r: (r["config_hash"], int(r["seed"])))
    return _csv_text(RUN_COLUMNS, rows)
