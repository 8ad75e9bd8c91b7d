"""Experiment, sweep and verify configuration files.

All three are JSON documents checked against the schemas below before
anything runs. Errors carry a JSON pointer to the offending key.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from ..evaluation import config_hash
from ..exbmdp import LinearEnvConfig
from ..grid.env import GridEnvConfig
from ..grid.model import GridModelConfig
from ..grid.train import GridTrainConfig
from ..linear_lam import LinearTrainConfig

SEED_ENV = "EXOLAM_SEED"
UINT64_MAX = 2**64 - 1


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        self.pointer = pointer or "/"
        super().__init__(f"{self.pointer}: {message}")


def _num(minimum=None, exclusive=False, maximum=None):
    s = {"type": "number"}
    if minimum is not None:
        s["exclusiveMinimum" if exclusive else "minimum"] = minimum
    if maximum is not None:
        s["maximum"] = maximum
    return s


def _int(minimum=None):
    s = {"type": "integer"}
    if minimum is not None:
        s["minimum"] = minimum
    return s


def _obj(props: dict, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SEEDS = {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": UINT64_MAX},
         "minItems": 1, "uniqueItems": True}

LINEAR_ENV = _obj({
    "d_s": _int(1), "d_a": _int(1), "d_o": _int(1), "n_xi": _int(1),
    "p_switch": _num(0, maximum=1), "alpha": _num(0), "n_traj": _int(1), "traj_len": _int(2),
})
LINEAR_MODEL = _obj({
    "d_z": _int(1), "lr": _num(0, True), "steps": _int(0), "batch_size": _int(1),
    "lambda_xexo": _num(0), "lambda_robust": _num(0),
    "robust_target": {"enum": ["action", "q", "none"]},
    "grad_clip": {"oneOf": [{"type": "null"}, _num(0, True)]},
    "log_every": _int(1),
})
EVAL = _obj({
    "lambda_ridge": _num(0), "n_anchors": _int(2), "n_draws": _int(2), "n_eval": _int(1),
})
GRID_ENV = _obj({"sigma": _num(0), "n_steps": _int(1)})
GRID_ARCH = _obj({
    "enc_channels": {"type": "array", "items": _int(1), "minItems": 1},
    "mlp_hidden": _int(1), "d_z": _int(1), "n_codes": _int(1), "beta": _num(0),
    "dec_channels": {"type": "array", "items": _int(1), "minItems": 1}, "d_y": _int(1),
})
GRID_MODEL = _obj({
    "steps": _int(0), "batch_size": _int(1), "lr": _num(0, True),
    "grad_clip": {"oneOf": [{"type": "null"}, _num(0, True)]},
    "lambda_xexo": _num(0), "lambda_act": _num(0), "label_fraction": _num(0, True, 1),
    "log_every": _int(1), "arch": GRID_ARCH,
})

EXPERIMENT_SCHEMAS = {
    "linear": _obj({"kind": {"const": "linear"}, "env": LINEAR_ENV, "model": LINEAR_MODEL,
                    "eval": EVAL, "seeds": SEEDS, "name": {"type": "string"}}, ["kind"]),
    "grid": _obj({"kind": {"const": "grid"}, "env": GRID_ENV, "model": GRID_MODEL,
                  "eval": EVAL, "seeds": SEEDS, "name": {"type": "string"}}, ["kind"]),
}

SWEEP_SCHEMA = _obj({
    "name": {"type": "string"},
    "base": {"type": "object"},
    "axes": {"type": "array", "items": _obj({
        "path": {"type": "string", "pattern": r"^(env|model|eval)(\.[A-Za-z_][A-Za-z0-9_]*)*$"},
        "values": {"type": "array", "minItems": 1},
    }, ["path", "values"])},
    "master_seed": {"type": "integer", "minimum": 0, "maximum": UINT64_MAX},
}, ["base", "axes"])

VERIFY_SCHEMA = _obj({
    "kind": {"const": "verify"},
    "name": {"type": "string"},
    "env": LINEAR_ENV,
    "checks": {"type": "array", "items": {"enum": ["noise", "prop1", "prop2", "prop3"]},
               "minItems": 1, "uniqueItems": True},
    "seeds": SEEDS,
    "noise": _obj({"n_traj": _int(1)}),
    "prop2": _obj({"n": _int(2), "dim": _int(2), "d_z": _int(1), "steps": _int(0),
                   "lr": _num(0, True),
                   "rho": {"type": "array", "items": _num(0, maximum=1)}}),
    "prop3": _obj({"draws": _int(1), "n_traj": _int(1), "train_steps": _int(0),
                   "targets": {"type": "array", "items": {"enum": ["action", "q"]}}}),
    "prop1": _obj({"n_rows": _int(2), "restarts": _int(1), "d_z": _int(1),
                   "p_grid": {"type": "array", "items": _num(0, maximum=1), "minItems": 1},
                   "max_steps": _int(1), "lr": _num(0, True)}),
}, ["kind"])

VERIFY_DEFAULTS = {
    "checks": ["noise", "prop3", "prop2", "prop1"],
    "seeds": [0, 1, 2, 3],
    "noise": {"n_traj": 8000},
    "prop2": {"n": 20000, "dim": 16, "d_z": 4, "steps": 20000, "lr": 1e-2,
              "rho": [0.95, 0.9, 0.85, 0.8, 0.4, 0.3, 0.2, 0.1]},
    "prop3": {"draws": 100, "n_traj": 500, "train_steps": 2000, "targets": ["action", "q"]},
    "prop1": {"n_rows": 20000, "restarts": 3, "d_z": 8, "p_grid": [0.0, 0.1, 0.3, 0.5],
              "max_steps": 50000, "lr": 1e-3},
}

EVAL_DEFAULTS = {"lambda_ridge": 1e-6, "n_anchors": 512, "n_draws": 16, "n_eval": 1200}


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def _check(instance, schema, prefix=()):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = list(prefix) + list(e.absolute_path)
        if e.validator == "additionalProperties" and isinstance(e.instance, dict):
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            if extra:
                path.append(extra[0])
                raise ConfigError(_pointer(path), f"unknown key {extra[0]!r}")
        raise ConfigError(_pointer(path), e.message)


def _drop_seed_fields(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "seed"}


def normalize_experiment(raw: dict) -> dict:
    """Schema-check and fill every default; the result is what gets hashed."""
    if not isinstance(raw, dict):
        raise ConfigError("/", "config must be a JSON object")
    kind = raw.get("kind")
    if kind not in EXPERIMENT_SCHEMAS:
        raise ConfigError("/kind", f"kind must be 'linear' or 'grid', got {kind!r}")
    _check(raw, EXPERIMENT_SCHEMAS[kind])
    out = {"kind": kind}
    if kind == "linear":
        env = {**_drop_seed_fields(LinearEnvConfig().to_dict()), **raw.get("env", {})}
        model = {**_drop_seed_fields(LinearTrainConfig().to_dict()), **raw.get("model", {})}
        try:
            LinearEnvConfig(**env).validate()
        except ValueError as exc:
            key = "p_switch" if "p_switch" in str(exc) else "d_a" if "d_a" in str(exc) else ""
            raise ConfigError(f"/env/{key}" if key else "/env", str(exc)) from None
        try:
            LinearTrainConfig(**model).validate()
        except ValueError as exc:
            raise ConfigError("/model", str(exc)) from None
        if model["d_z"] >= env["d_o"]:
            raise ConfigError("/model/d_z", f"d_z={model['d_z']} must be below d_o={env['d_o']}")
    else:
        env = {**_drop_seed_fields(GridEnvConfig().to_dict()), **raw.get("env", {})}
        base = _drop_seed_fields(GridTrainConfig().to_dict())
        arch = {**base.pop("model"), **raw.get("model", {}).get("arch", {})}
        model = {**base, **{k: v for k, v in raw.get("model", {}).items() if k != "arch"}}
        model["arch"] = arch
    out["env"] = env
    out["model"] = model
    out["eval"] = {**EVAL_DEFAULTS, **raw.get("eval", {})}
    out["seeds"] = list(raw.get("seeds", [0, 1, 2, 3] if kind == "linear" else [0, 1, 2]))
    if "name" in raw:
        out["name"] = raw["name"]
    return out


def experiment_hash(cfg: dict) -> str:
    """Hash over the normalized config without seeds or name."""
    return config_hash({k: v for k, v in cfg.items() if k not in ("seeds", "name")})


def normalize_verify(raw: dict) -> dict:
    _check(raw, VERIFY_SCHEMA)
    out = copy.deepcopy(VERIFY_DEFAULTS)
    out["kind"] = "verify"
    for k, v in raw.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    env = {**_drop_seed_fields(LinearEnvConfig(p_switch=0.3).to_dict()), **raw.get("env", {})}
    try:
        LinearEnvConfig(**env).validate()
    except ValueError as exc:
        raise ConfigError("/env", str(exc)) from None
    out["env"] = env
    return out


# ---------------------------------------------------------------- env/model objects


def linear_objects(cfg: dict, seed: int):
    env = LinearEnvConfig(**cfg["env"], seed=seed).validate()
    model = LinearTrainConfig(**cfg["model"], seed=seed).validate()
    return env, model


def grid_objects(cfg: dict, seed: int):
    env = GridEnvConfig(**cfg["env"], seed=seed).validate()
    m = dict(cfg["model"])
    arch = GridModelConfig.from_dict(m.pop("arch"))
    return env, GridTrainConfig(**m, seed=seed, model=arch).validate()


def variant_of(cfg: dict) -> str:
    m = cfg["model"]
    if cfg["kind"] == "grid":
        return GridTrainConfig(lambda_xexo=m["lambda_xexo"], lambda_act=m["lambda_act"]).variant
    parts = []
    if m["lambda_xexo"] > 0:
        parts.append("xexo")
    if m["lambda_robust"] > 0 and m["robust_target"] != "none":
        parts.append(m["robust_target"])
    return "+".join(parts) or "baseline"


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepSpec:
    base: dict
    axes: list = field(default_factory=list)   # [(path, values)]
    master_seed: int = 0
    name: str = "sweep"

    def points(self) -> list[tuple[dict, dict]]:
        """Cross product of the axes as (normalized config, overrides)."""
        combos = [{}]
        for path, values in self.axes:
            combos = [{**c, path: v} for c in combos for v in values]
        out = []
        for i, ov in enumerate(combos):
            raw = copy.deepcopy(self.base)
            for path, v in ov.items():
                _assign(raw, path, v)
            try:
                out.append((normalize_experiment(raw), ov))
            except ConfigError as exc:
                raise ConfigError(f"/axes (point {i}) {exc.pointer}", str(exc)) from None
        return out

    @property
    def seeds(self) -> list[int]:
        return normalize_experiment(self.base)["seeds"]

    def n_runs(self) -> int:
        return int(np.prod([len(v) for _, v in self.axes])) * len(self.seeds)


def _assign(d: dict, path: str, value) -> None:
    keys = path.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    if isinstance(value, dict):
        cur.setdefault(keys[-1], {})
        cur[keys[-1]].update(value)
    else:
        cur[keys[-1]] = value


def load_sweep(raw: dict, master_seed: int | None = None) -> SweepSpec:
    _check(raw, SWEEP_SCHEMA)
    try:
        normalize_experiment(raw["base"])
    except ConfigError as exc:
        raise ConfigError("/base" + exc.pointer.rstrip("/"), str(exc).split(": ", 1)[-1]) from None
    axes = [(a["path"], list(a["values"])) for a in raw["axes"]]
    seed = resolve_master_seed(master_seed, raw.get("master_seed", 0))
    spec = SweepSpec(raw["base"], axes, seed, raw.get("name", "sweep"))
    spec.points()
    return spec


def resolve_master_seed(flag: int | None, from_file: int = 0) -> int:
    """``--seed`` beats ``EXOLAM_SEED`` beats the file value."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            v = int(env)
        except ValueError:
            raise ConfigError("/", f"{SEED_ENV}={env!r} is not an integer") from None
        if not 0 <= v <= UINT64_MAX:
            raise ConfigError("/", f"{SEED_ENV} must be a 64-bit unsigned integer")
        return v
    return int(from_file)


def run_seed(master_seed: int, seed: int) -> int:
    """Seed actually used by a job: derived from the master seed and the
    replicate seed, so replicate k shares its streams across sweep points."""
    if master_seed == 0:
        return int(seed)
    ss = np.random.SeedSequence([int(master_seed), int(seed)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    except OSError as exc:
        raise ConfigError("/", f"cannot read {path}: {exc.strerror}") from None


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
