import json
from pathlib import Path

import numpy as np
import pytest

from exolam import container
from exolam.runner import cli, report
from exolam.runner.config import (ConfigError, experiment_hash, load_sweep,
                                  normalize_experiment, normalize_verify, resolve_master_seed,
                                  run_seed)
from exolam.runner.jobs import load_checkpoint
from exolam.runner.store import Store, aggregate, aggregate_csv, fmt, make_row
from exolam.runner.sweep import JobCache, plan, run_sweep

pytestmark = pytest.mark.filterwarnings("ignore:.*encountered in matmul:RuntimeWarning")

TINY_ENV = {"d_s": 2, "d_a": 2, "d_o": 6, "n_xi": 3, "p_switch": 0.3, "alpha": 0.5,
            "n_traj": 20, "traj_len": 4}
TINY_MODEL = {"d_z": 2, "steps": 30, "batch_size": 16, "lr": 1e-2, "log_every": 10}
TINY_EVAL = {"n_anchors": 8, "n_draws": 3}


def tiny(**over):
    cfg = {"kind": "linear", "env": dict(TINY_ENV), "model": dict(TINY_MODEL),
           "eval": dict(TINY_EVAL), "seeds": [0, 1]}
    for k, v in over.items():
        if isinstance(v, dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    return cfg


def tiny_sweep(values=(0.0, 0.3), seeds=(0, 1), master=0):
    return {"name": "t", "base": tiny(seeds=list(seeds)), "master_seed": master,
            "axes": [{"path": "env.p_switch", "values": list(values)}]}


def dump(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("EXOLAM_SEED", raising=False)


# ---------------------------------------------------------------- config


def test_normalize_fills_defaults_and_hash_ignores_seeds():
    a = normalize_experiment({"kind": "linear"})
    assert a["env"]["d_o"] == 128 and a["model"]["steps"] == 20000 and a["seeds"] == [0, 1, 2, 3]
    b = normalize_experiment({"kind": "linear", "seeds": [7], "name": "x"})
    assert experiment_hash(a) == experiment_hash(b)
    c = normalize_experiment({"kind": "linear", "env": {"p_switch": 0.1}})
    assert experiment_hash(a) != experiment_hash(c)
    assert normalize_experiment({"kind": "grid"})["seeds"] == [0, 1, 2]


@pytest.mark.parametrize("raw, pointer", [
    ({"kind": "linear", "env": {"p_swich": 0.1}}, "/env/p_swich"),
    ({"kind": "linear", "model": {"lr": -1}}, "/model/lr"),
    ({"kind": "linear", "env": {"n_xi": 1, "p_switch": 0.2}}, "/env/p_switch"),
    ({"kind": "linear", "env": {"d_o": 4}, "model": {"d_z": 4}}, "/model/d_z"),
    ({"kind": "linear", "seeds": [-1]}, "/seeds/0"),
    ({"kind": "cnn"}, "/kind"),
    ({"kind": "grid", "model": {"arch": {"colour": 1}}}, "/model/arch/colour"),
])
def test_config_errors_carry_pointer(raw, pointer):
    with pytest.raises(ConfigError) as exc:
        normalize_experiment(raw)
    assert exc.value.pointer == pointer


def test_unknown_key_message():
    with pytest.raises(ConfigError, match="unknown key 'p_swich'"):
        normalize_experiment({"kind": "linear", "env": {"p_swich": 0.1}})


def test_verify_config_defaults_and_errors():
    cfg = normalize_verify({"kind": "verify", "prop2": {"steps": 5}})
    assert cfg["prop2"]["steps"] == 5 and cfg["prop2"]["dim"] == 16
    with pytest.raises(ConfigError, match="/checks/0"):
        normalize_verify({"kind": "verify", "checks": ["prop9"]})


def test_seed_resolution_order(monkeypatch):
    assert resolve_master_seed(None, 4) == 4
    monkeypatch.setenv("EXOLAM_SEED", "11")
    assert resolve_master_seed(None, 4) == 11
    assert resolve_master_seed(5, 4) == 5
    monkeypatch.setenv("EXOLAM_SEED", "abc")
    with pytest.raises(ConfigError):
        resolve_master_seed(None)


def test_run_seed():
    assert run_seed(0, 3) == 3
    a = run_seed(9, 3)
    assert a == run_seed(9, 3) and a != run_seed(9, 4) and a != run_seed(10, 3)
    assert 0 <= a < 2**64


def test_sweep_points_and_run_count():
    spec = load_sweep(tiny_sweep(values=(0.0, 0.1, 0.2, 0.3), seeds=(0, 1, 2, 3)))
    assert spec.n_runs() == 16
    pts = spec.points()
    assert [ov for _, ov in pts] == [{"env.p_switch": v} for v in (0.0, 0.1, 0.2, 0.3)]
    assert [c["env"]["p_switch"] for c, _ in pts] == [0.0, 0.1, 0.2, 0.3]
    assert len(plan(spec)) == 16


def test_sweep_cross_product():
    raw = tiny_sweep()
    raw["axes"].append({"path": "model.lambda_xexo", "values": [0.0, 1.0, 2.0]})
    spec = load_sweep(raw)
    assert len(spec.points()) == 6 and spec.n_runs() == 12


def test_sweep_rejects_bad_point():
    raw = tiny_sweep(values=(0.3, 1.5))
    with pytest.raises(ConfigError, match="/axes"):
        load_sweep(raw)
    with pytest.raises(ConfigError, match="/base/env/bogus"):
        load_sweep({"base": tiny(env={"bogus": 1}), "axes": []})


def test_sweep_master_seed_flag_overrides_file():
    assert load_sweep(tiny_sweep(master=3)).master_seed == 3
    assert load_sweep(tiny_sweep(master=3), master_seed=8).master_seed == 8


# ---------------------------------------------------------------- store


def test_fmt():
    assert fmt(0.1) == "0.10000000000000001"
    assert float(fmt(1 / 3)) == 1 / 3
    assert fmt(None) == "" and fmt(float("nan")) == ""
    assert fmt(3) == "3" and fmt(True) == "true" and fmt("x") == "x"


def _row(cfg, seed, nmse, status_ok=True):
    return make_row(cfg, {}, seed, seed, {"action_nmse": nmse} if status_ok else None,
                    "" if status_ok else "boom")


def test_aggregate_mean_stderr_dedupe_and_order():
    c1 = normalize_experiment(tiny())
    c2 = normalize_experiment(tiny(env={"alpha": 1.0}))
    rows = [_row(c2, 1, 0.5), _row(c1, 1, 0.2), _row(c1, 0, 0.1), _row(c1, 1, 0.3),
            _row(c2, 0, 0.7), _row(c2, 2, 0.0, status_ok=False)]
    agg = aggregate(rows)
    assert [a["config_hash"] for a in agg] == sorted({experiment_hash(c1), experiment_hash(c2)})
    by = {a["config_hash"]: a for a in agg}
    a1 = by[experiment_hash(c1)]
    # the repeated (c1, seed 1) row keeps its last value
    assert a1["n_seeds"] == 2 and a1["action_nmse_mean"] == pytest.approx(0.2)
    assert a1["action_nmse_stderr"] == pytest.approx(0.1)
    a2 = by[experiment_hash(c2)]
    assert a2["n_seeds"] == 2 and a2["n_failed"] == 1
    unique = [r for i, r in enumerate(rows) if i != 1]
    assert aggregate_csv(unique) == aggregate_csv(list(reversed(unique)))


def test_store_roundtrip(tmp_path):
    cfg = normalize_experiment(tiny())
    st = Store(tmp_path)
    h = st.save_config(cfg)
    assert st.load_config(h)["env"] == cfg["env"]
    st.append(_row(cfg, 0, 0.25))
    st.append(_row(cfg, 1, 0.0, status_ok=False))
    rows = st.rows()
    assert rows[0]["action_nmse"] == 0.25 and rows[0]["config_hash"] == h
    assert rows[1]["status"] == "failed" and rows[1]["action_nmse"] is None
    with pytest.raises(KeyError):
        make_row(cfg, {}, 0, 0, {"accuracy": 1.0})


# ---------------------------------------------------------------- sweeps


def test_sweep_rows_and_aggregate(tmp_path):
    spec = load_sweep(tiny_sweep(values=(0.0, 0.1, 0.2, 0.3), seeds=(0, 1, 2, 3)))
    res = run_sweep(spec, tmp_path, echo=lambda s: None)
    assert len(res.rows) == 16 and res.n_failed == 0
    assert len(res.aggregate.strip().splitlines()) == 1 + 4
    st = Store(tmp_path)
    for r in st.rows():
        assert st.load_config(r["config_hash"])["env"]["p_switch"] == r["p_switch"]


def test_sweep_prints_run_count(tmp_path):
    lines = []
    run_sweep(load_sweep(tiny_sweep()), tmp_path, echo=lines.append)
    assert lines[0] == "t: 2 points x 2 seeds = 4 runs"


def test_sweep_deterministic_across_reruns_and_jobs(tmp_path):
    spec = load_sweep(tiny_sweep(master=17))
    a = run_sweep(spec, tmp_path / "a", jobs=1, echo=lambda s: None).aggregate
    b = run_sweep(spec, tmp_path / "b", jobs=1, echo=lambda s: None).aggregate
    c = run_sweep(spec, tmp_path / "c", jobs=2, echo=lambda s: None).aggregate
    assert a == b == c
    assert (tmp_path / "a" / "aggregate.csv").read_bytes() == (tmp_path / "c" / "aggregate.csv").read_bytes()
    other = run_sweep(load_sweep(tiny_sweep(master=18)), tmp_path / "d", echo=lambda s: None).aggregate
    assert other != a


def test_failed_job_recorded_and_sweep_continues(tmp_path):
    raw = tiny_sweep()
    raw["base"]["model"]["lr"] = 1e300   # Adam moves each weight by ~lr per step
    raw["base"]["model"]["steps"] = 3
    res = run_sweep(load_sweep(raw), tmp_path, echo=lambda s: None)
    assert res.n_failed == 4 and len(res.rows) == 4
    assert all(r["status"] == "failed" and r["error"] for r in res.rows)


def test_job_cache_reuses_results(tmp_path):
    spec = load_sweep(tiny_sweep())
    first = run_sweep(spec, tmp_path / "a", cache=tmp_path / "cache", echo=lambda s: None)
    job = plan(spec)[0]
    cache = JobCache(tmp_path / "cache")
    hit = cache.get(job)
    assert hit is not None and "action_nmse" in hit
    hit["action_nmse"] = 123.0
    cache.put(job, hit)
    second = run_sweep(spec, tmp_path / "b", cache=tmp_path / "cache", echo=lambda s: None)
    assert any(r.get("action_nmse") == 123.0 for r in second.rows)
    assert first.aggregate != second.aggregate


# ---------------------------------------------------------------- CLI


def test_cli_gen_summary_and_bytes(tmp_path, capsys):
    cfg = dump(tmp_path, "c.json", tiny(env={"p_switch": 0.0}))
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "a.bin")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["mean_eps_sq"] == 0.0 and info["switch_rate"] == 0.0 and info["mean_q_sq"] > 0
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "b.bin")]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    meta, _ = container.read(tmp_path / "a.bin")
    assert meta["env"]["d_o"] == 6


def test_cli_gen_grid(tmp_path, capsys):
    cfg = dump(tmp_path, "g.json", {"kind": "grid", "env": {"sigma": 1.0, "n_steps": 30}})
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "g.bin")]) == 0
    assert json.loads(capsys.readouterr().out)["rows"] == 30


def test_cli_config_error_exit_1(tmp_path, capsys):
    cfg = dump(tmp_path, "c.json", tiny(env={"n_xi": 1, "p_switch": 0.2}))
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path / "x.bin")]) == 1
    assert "/env/p_switch" in capsys.readouterr().err
    assert cli.main(["gen", "--config", str(tmp_path / "missing.json"), "--out", "x"]) == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1


def test_cli_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--config", "x", "--out", "y", "--jobs", "0"])
    assert exc.value.code == 1


def test_cli_train_steps_zero_is_init(tmp_path):
    from exolam import linear_lam as ll
    from exolam.numerics import RngStream
    cfg = dump(tmp_path, "c.json", tiny(seeds=[5]))
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "s"), "--steps", "0"]) == 0
    ckpt = next((tmp_path / "s").glob("*.ckpt"))
    _, seed, step, params, _ = load_checkpoint(ckpt)
    assert seed == 5 and step == 0
    ref = ll.init_params(6, 2, RngStream(5, ll.STREAM_INIT))
    for a, b in zip(params.arrays(), ref.arrays()):
        np.testing.assert_array_equal(a, b)


def test_cli_train_resume_matches_uninterrupted(tmp_path):
    cfg = dump(tmp_path, "c.json", tiny(seeds=[2], model={"steps": 40}))
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "full")]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "half"), "--steps", "15"]) == 0
    half = next((tmp_path / "half").glob("*.ckpt"))
    assert cli.main(["train", "--resume", str(half), "--steps", "40",
                     "--out", str(tmp_path / "resumed")]) == 0
    _, _, step, p_full, _ = load_checkpoint(next((tmp_path / "full").glob("*.ckpt")))
    _, _, step2, p_res, _ = load_checkpoint(next((tmp_path / "resumed").glob("*.ckpt")))
    assert step == step2 == 40
    for a, b in zip(p_full.arrays(), p_res.arrays()):
        np.testing.assert_array_equal(a, b)
    rows = Store(tmp_path / "full").rows()
    assert len(rows) == 1 and rows[0]["status"] == "ok"


def test_cli_train_divergence_exit_2(tmp_path):
    cfg = dump(tmp_path, "c.json", tiny(seeds=[0], model={"lr": 1e300, "steps": 3}))
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "s")]) == 2
    assert Store(tmp_path / "s").rows()[0]["status"] == "failed"


def test_cli_sweep_and_report(tmp_path):
    sw = dump(tmp_path, "s.json", tiny_sweep(values=report.P_GRID, seeds=(0,)))
    store = tmp_path / "store"
    assert cli.main(["sweep", "--config", sw, "--out", str(store)]) == 0
    assert cli.main(["report", "--store", str(store), "--figure", "fig2c",
                     "--out", str(tmp_path / "rep")]) == 0
    text = (tmp_path / "rep" / "fig2c.csv").read_text().splitlines()
    assert text[0] == "figure,series,x,metric,mean,stderr,n"
    assert len(text) == 1 + 2 * len(report.P_GRID)
    assert (tmp_path / "rep" / "fig2c.svg").read_text().startswith("<svg")
    # the same store lacks the alpha sweep
    assert cli.main(["report", "--store", str(store), "--figure", "fig3r",
                     "--out", str(tmp_path / "rep")]) == 2


def test_cli_report_empty_store_exit_2(tmp_path, capsys):
    assert cli.main(["report", "--store", str(tmp_path), "--figure", "fig2c",
                     "--out", str(tmp_path / "r")]) == 2
    assert "missing" in capsys.readouterr().err


def test_cli_sweep_failure_exit_2(tmp_path):
    raw = tiny_sweep(seeds=(0,))
    raw["base"]["model"].update(lr=1e300, steps=3)
    assert cli.main(["sweep", "--config", dump(tmp_path, "s.json", raw), "--out", str(tmp_path / "o")]) == 2


def test_cli_verify_pass_and_fail(tmp_path):
    env = {"d_s": 2, "d_a": 2, "d_o": 8, "n_xi": 3, "p_switch": 0.3, "n_traj": 40, "traj_len": 4}
    ok = {"kind": "verify", "checks": ["noise", "prop3"], "seeds": [0], "env": env,
          "noise": {"n_traj": 50}, "prop3": {"draws": 5, "n_traj": 30, "train_steps": 20}}
    out = tmp_path / "rep.json"
    assert cli.main(["verify", "--config", dump(tmp_path, "v.json", ok), "--out", str(out)]) == 0
    bundle = json.loads(out.read_text())
    assert bundle["summary"]["passed"] and len(bundle["reports"]) == 3
    # an untrained cross-exogenous model cannot match the CCA oracle
    bad = {"kind": "verify", "checks": ["prop2"], "seeds": [0], "env": env,
           "prop2": {"n": 2000, "dim": 6, "d_z": 2, "steps": 0, "rho": [0.9, 0.8, 0.2, 0.1, 0.05, 0.0]}}
    assert cli.main(["verify", "--config", dump(tmp_path, "b.json", bad)]) == 3


def test_cli_verify_alpha_zero_degenerate(tmp_path, capsys):
    env = {"d_s": 2, "d_a": 2, "d_o": 8, "n_xi": 3, "p_switch": 0.3, "alpha": 0.0,
           "n_traj": 40, "traj_len": 4}
    cfg = {"kind": "verify", "checks": ["noise"], "seeds": [0, 1], "env": env, "noise": {"n_traj": 50}}
    assert cli.main(["verify", "--config", dump(tmp_path, "v.json", cfg)]) == 0
    assert capsys.readouterr().out.count("degenerate") == 2


CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.json"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    raw = json.loads(path.read_text())
    if path.name.endswith(".sweep.json"):
        assert load_sweep(raw).n_runs() > 0
    elif raw["kind"] == "verify":
        normalize_verify(raw)
    else:
        normalize_experiment(raw)


def test_alpha_zero_verify_config_is_degenerate(tmp_path, capsys):
    path = [p for p in CONFIGS if p.name == "verify_alpha0.json"][0]
    assert cli.main(["verify", "--config", str(path), "--seed", "0"]) == 0
    statuses = [line.split()[1] for line in capsys.readouterr().out.splitlines()[2:]]
    assert statuses and set(statuses) == {"degenerate"}
