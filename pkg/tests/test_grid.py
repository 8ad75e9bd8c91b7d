import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exolam.grid import env as genv
from exolam.grid.model import (DTYPE, Graph, GridLamParams, GridModelConfig, init_grid_params,
                               nearest_code, predict)
from exolam.grid.tape import Tape, col2im3x3, im2col3x3
from exolam.grid.train import GridTrainConfig, grid_metrics, labeled_indices, train_grid
from exolam.numerics import RngStream

SMALL = GridModelConfig(enc_channels=(3, 3), mlp_hidden=6, d_z=3, n_codes=4,
                        dec_channels=(3,), d_y=4)


def small_params(seed=0, cfg=SMALL):
    return init_grid_params(cfg, RngStream(seed, 1))


def data(sigma=1.0, n=200, seed=0):
    return genv.generate_grid(genv.GridEnvConfig(sigma=sigma, n_steps=n, seed=seed))


# ---------------------------------------------------------------- environment


def test_policy_is_a_twelve_cycle():
    c, seen = (0, 0), []
    for _ in range(12):
        seen.append(c)
        c = genv.step_cell(c, genv.snaking_policy(c))
    assert c == (0, 0) and len(set(seen)) == 12
    assert all(r < genv.EXO_ROW and 0 <= col < 4 for r, col in seen)
    with pytest.raises(ValueError):
        genv.snaking_policy((3, 0))


def test_action_frequencies_over_one_cycle():
    d = data(n=1200)
    counts = np.bincount(d.action, minlength=4)
    # right 3, left 3, up 3, down 3 per lap of the cycle
    assert counts.tolist() == [300, 300, 300, 300]


def test_frames_and_pairs():
    d = data(sigma=2.0, n=4000)
    agent = d.obs[:, :genv.EXO_ROW]
    assert np.all(agent.sum(axis=(1, 2)) == 1.0)
    assert set(np.unique(d.obs[:, genv.EXO_ROW])) == {0.0, 2.0}
    assert d.obs[:, genv.EXO_ROW].mean() == pytest.approx(1.0, abs=0.03)
    np.testing.assert_array_equal(d.obs[1:], d.obs_next[:-1])
    # paired frames share the controllable rows and redraw the noise row
    np.testing.assert_array_equal(d.obs_tilde[:, :genv.EXO_ROW], agent)
    np.testing.assert_array_equal(d.obs_tilde_next[:, :genv.EXO_ROW], d.obs_next[:, :genv.EXO_ROW])
    assert np.mean(d.obs_tilde[:, genv.EXO_ROW] != d.obs[:, genv.EXO_ROW]) == pytest.approx(0.5, abs=0.03)


def test_sigma_zero_pairs_identical():
    d = data(sigma=0.0)
    np.testing.assert_array_equal(d.obs_tilde, d.obs)
    np.testing.assert_array_equal(d.obs_tilde_next, d.obs_next)


def test_generation_deterministic_and_eval_independent():
    a, b = data(seed=4), data(seed=4)
    np.testing.assert_array_equal(a.obs, b.obs)
    ev = genv.eval_data(genv.GridEnvConfig(sigma=1.0, seed=4), 200)
    assert not np.array_equal(ev.obs[:, genv.EXO_ROW], a.obs[:, genv.EXO_ROW])


def test_save_load_roundtrip(tmp_path):
    d = data()
    genv.save(d, tmp_path / "g.bin")
    back = genv.load(tmp_path / "g.bin")
    for k in ("obs", "obs_next", "obs_tilde", "obs_tilde_next", "action", "cell", "cell_next"):
        np.testing.assert_array_equal(getattr(back, k), getattr(d, k))
    assert back.cfg == d.cfg


# ---------------------------------------------------------------- tape primitives


def _conv_bruteforce(x, w):
    n, h, wd, c = x.shape
    w4 = w.reshape(3, 3, c, -1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w4.shape[-1]))
    for i in range(h):
        for j in range(wd):
            for dy in range(3):
                for dx in range(3):
                    out[:, i, j] += xp[:, i + dy, j + dx] @ w4[dy, dx]
    return out


def test_conv_matches_bruteforce():
    x, w = RngStream(0).normal((2, 4, 4, 3)), RngStream(1).normal((27, 5))
    t = Tape()
    out = t.conv3x3(t.const(x), t.const(w)).value
    np.testing.assert_allclose(out, _conv_bruteforce(x, w), rtol=1e-12, atol=1e-12)


def test_col2im_is_adjoint_of_im2col():
    x, c = RngStream(2).normal((2, 4, 4, 3)), RngStream(3).normal((2, 4, 4, 9, 3))
    assert np.sum(im2col3x3(x) * c) == pytest.approx(np.sum(x * col2im3x3(c)), rel=1e-12)


def _fd_check(build, shapes, seed, eps=1e-6, tol=1e-7):
    """Central differences in float64 against the tape gradient."""
    rng = RngStream(seed)
    vals = [rng.normal(s) for s in shapes]

    def f(vs):
        t = Tape()
        nodes = [t.param(v) for v in vs]
        return float(build(t, nodes).value)

    t = Tape()
    nodes = [t.param(v) for v in vals]
    loss = build(t, nodes)
    t.backward(loss)
    for k, v in enumerate(vals):
        fd = np.zeros_like(v)
        for i in range(v.size):
            vp = [x.copy() for x in vals]
            vm = [x.copy() for x in vals]
            vp[k].flat[i] += eps
            vm[k].flat[i] -= eps
            fd.flat[i] = (f(vp) - f(vm)) / (2 * eps)
        np.testing.assert_allclose(nodes[k].grad, fd, rtol=1e-5, atol=tol)


@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients(seed):
    target = RngStream(seed, 9).normal((2, 4, 4, 2))
    proj = np.eye(4)[:, :2]

    def build(t, n):
        x, w, b, z = n
        y = t.relu(t.bias_add(t.conv3x3(x, w), b))
        y = t.concat([y, t.broadcast_spatial(z, 4, 4)], axis=-1)
        y = t.scale(t.reshape(t.reshape(y, (2, -1)), (2, 4, 4, 4)), 0.7)
        y = t.add(y, y)
        y = t.matmul(t.reshape(y, (-1, 4)), t.const(proj))
        return t.mse(t.reshape(y, (2, 4, 4, 2)), t.const(target))

    _fd_check(build, [(2, 4, 4, 2), (18, 2), (2,), (2, 2)], seed)


def test_gather_gradient_accumulates_repeats():
    t = Tape()
    table = t.param(np.arange(6.0).reshape(3, 2))
    rows = t.gather_rows(table, np.array([0, 2, 2]))
    loss = t.mse(rows, t.const(np.zeros((3, 2))))
    t.backward(loss)
    np.testing.assert_allclose(table.grad, [[0.0, 2 / 6], [0.0, 0.0], [2 * 2 * 4 / 6, 2 * 2 * 5 / 6]])


def test_straight_through_contract():
    t = Tape()
    z_pre = t.param(RngStream(0).normal((5, 3)))
    book = t.param(RngStream(1).normal((4, 3)))
    codes = nearest_code(z_pre.value, book.value)
    z_code = t.gather_rows(book, codes)
    z_q = t.straight_through(z_pre, z_code)
    np.testing.assert_array_equal(z_q.value, book.value[codes])
    target = RngStream(2).normal((5, 3))
    t.backward(t.mse(z_q, t.const(target)))
    # the adjoint of z_q lands on z_pre unchanged; the codebook sees none of it
    np.testing.assert_allclose(z_pre.grad, 2.0 / 15 * (z_q.value - target), rtol=1e-12)
    assert book.grad is None


def test_stop_gradient_blocks():
    t = Tape()
    x = t.param(np.ones(3))
    loss = t.mse(t.stop_gradient(x), t.const(np.zeros(3)))
    t.backward(loss)
    assert x.grad is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 40), st.integers(1, 8))
def test_nearest_code_bruteforce(seed, n, k):
    z = RngStream(seed).normal((n, 3))
    book = RngStream(seed, 1).normal((k, 3))
    brute = np.array([np.argmin([np.sum((zi - c) ** 2) for c in book]) for zi in z])
    got = nearest_code(z, book)
    d = ((z[:, None] - book[None]) ** 2).sum(-1)
    # ties aside, the indices agree; in all cases the chosen distance is minimal
    np.testing.assert_allclose(d[np.arange(n), got], d[np.arange(n), brute], rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- model gradients (32-bit)


def _as64(p: GridLamParams) -> GridLamParams:
    return GridLamParams(p.cfg, {k: v.astype(np.float64) for k, v in p.arrays.items()})


def _subnet_grad_check(loss_fn, names, seed, n_coords=12):
    """Analytic float32 tape gradient vs central differences in float64 on a
    random subset of coordinates of each named tensor."""
    p32 = small_params(seed)
    # nonzero biases keep pre-activations of all-zero input patches off the ReLU kink
    brng = RngStream(seed, 78)
    for k, v in p32.arrays.items():
        if k.endswith("_b"):
            p32.arrays[k] = (0.1 * brng.normal(v.shape)).astype(DTYPE)
    g = Graph(p32)
    g.tape.backward(loss_fn(g))
    p64 = _as64(p32)
    rng = RngStream(seed, 77)
    for name in names:
        analytic = g.p[name].grad
        assert analytic is not None and analytic.dtype == np.float32, name
        coords = rng.integers(0, analytic.size, size=min(n_coords, analytic.size))
        fd, an = [], []
        for i in coords:
            vals = []
            for sgn in (1, -1):
                q = p64.copy()
                q.arrays[name].flat[i] += sgn * 1e-6
                vals.append(float(loss_fn(Graph(q)).value))
            fd.append((vals[0] - vals[1]) / 2e-6)
            an.append(float(analytic.flat[i]))
        fd, an = np.array(fd), np.array(an)
        err = np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-8)
        assert err <= 1e-3, (name, err)


@pytest.mark.parametrize("seed", range(4))
def test_decoder_gradients(seed):
    d = data(sigma=1.0, n=8, seed=seed)
    z = RngStream(seed, 3).normal((8, SMALL.d_z))

    def loss(g):
        t = g.tape
        pred = g.decode(d.obs, t.const(z.astype(g.p["dec_out_w"].value.dtype)))
        return t.mse(pred, t.const(d.obs_next.astype(DTYPE)))

    _subnet_grad_check(loss, ["dec_conv0_w", "dec_conv0_b", "dec_out_w", "dec_out_b"], seed)


@pytest.mark.parametrize("seed", range(4))
def test_encoder_gradients(seed):
    d = data(sigma=1.0, n=8, seed=seed)

    def loss(g):
        z_pre, _, _, _ = g.encode(d.obs, d.obs_next)
        return g.robust_loss(z_pre, d.action)

    _subnet_grad_check(loss, ["enc_conv0_w", "enc_conv0_b", "enc_conv1_w", "enc_conv1_b",
                              "enc_fc0_w", "enc_fc1_w", "enc_fc1_b", "head_w"], seed)


def test_vq_gradients_follow_stop_gradient_rules():
    # stop-gradient makes these differ from the derivative of the loss value,
    # so they are checked against their closed form instead
    p = small_params(2)
    d = data(n=10)
    g = Graph(p)
    z_pre, _, z_code, codes = g.encode(d.obs, d.obs_next)
    g.tape.backward(g.vq_loss(z_pre, z_code))
    zp = z_pre.value.astype(np.float64)
    diff = zp - p.codebook[codes]
    k = 2.0 / diff.size
    book = np.zeros_like(p.codebook, dtype=np.float64)
    np.add.at(book, codes, -k * diff)
    np.testing.assert_allclose(g.p["codebook"].grad, book, rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(z_pre.grad, SMALL.beta * k * diff, rtol=1e-4, atol=1e-7)


def test_vq_loss_value():
    p = small_params(0)
    g = Graph(p)
    d = data(n=10)
    z_pre, _, z_code, codes = g.encode(d.obs, d.obs_next)
    diff = z_pre.value.astype(np.float64) - p.codebook[codes]
    assert float(g.vq_loss(z_pre, z_code).value) == pytest.approx((1 + SMALL.beta) * np.mean(diff ** 2), rel=1e-5)


# ---------------------------------------------------------------- training


def tcfg(**kw):
    base = dict(steps=6, batch_size=16, lr=1e-3, log_every=2, model=SMALL)
    base.update(kw)
    return GridTrainConfig(**base)


def test_steps_zero_returns_init():
    res = train_grid(tcfg(steps=0, seed=3), data())
    ref = init_grid_params(SMALL, RngStream(3, 41))
    for k in ref.arrays:
        np.testing.assert_array_equal(res.params.arrays[k], ref.arrays[k])
    assert res.history == []


@pytest.mark.parametrize("variant", [{}, {"lambda_xexo": 1.0}, {"lambda_act": 1.0}])
def test_training_deterministic_and_resumable(variant):
    d = data()
    a = train_grid(tcfg(**variant), d)
    b = train_grid(tcfg(**variant), d)
    half = train_grid(tcfg(steps=3, **variant), d)
    c = train_grid(tcfg(**variant), d, init=half.params, adam=half.adam, start_step=3)
    for k in a.params.arrays:
        np.testing.assert_array_equal(a.params.arrays[k], b.params.arrays[k])
        np.testing.assert_array_equal(a.params.arrays[k], c.params.arrays[k])
    assert a.params.arrays["enc_fc1_w"].dtype == np.float32


def test_variant_names_and_loss_parts():
    assert tcfg().variant == "vanilla"
    assert tcfg(lambda_xexo=1.0).variant == "xexo"
    assert tcfg(lambda_act=1.0).variant == "robust"
    res = train_grid(tcfg(lambda_xexo=1.0, lambda_act=1.0, steps=2, log_every=1), data())
    assert {"loss_lam", "loss_vq", "loss_xexo", "loss_robust"} <= set(res.history[-1])


def test_training_reduces_reconstruction():
    d = data(sigma=0.0, n=600)
    ev = genv.eval_data(genv.GridEnvConfig(sigma=0.0), 200)
    before = grid_metrics(small_params(0), ev)["recon_mse"]
    res = train_grid(tcfg(steps=300, lr=3e-3, seed=0, batch_size=32), d)
    after = grid_metrics(res.params, ev)
    assert after["recon_mse"] < 0.5 * before
    assert 1 <= after["codes_used"] <= SMALL.n_codes


def test_labeled_indices():
    idx = labeled_indices(1000, 0.01, 3)
    assert len(idx) == 10 and np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(idx, labeled_indices(1000, 0.01, 3))
    assert len(labeled_indices(10, 0.01, 0)) == 1


def test_grid_metrics_consistency_zero_at_sigma_zero():
    ev = genv.eval_data(genv.GridEnvConfig(sigma=0.0), 100)
    m = grid_metrics(small_params(1), ev)
    assert m["consistency_loss"] == 0.0 and m["code_disagreement"] == 0.0
    z, zq, codes, pred = predict(small_params(1), ev)
    assert pred.shape == ev.obs.shape and z.shape == (100, SMALL.d_z)


def test_config_validation():
    with pytest.raises(ValueError):
        tcfg(label_fraction=0.0).validate()
    with pytest.raises(ValueError):
        genv.GridEnvConfig(sigma=-1).validate()
