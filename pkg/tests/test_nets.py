import math

import numpy as np
import pytest

from fbsde_pricer.autodiff import Tape, backward
from fbsde_pricer.errors import ConfigError, DataError
from fbsde_pricer.nets import (
    AAF_INIT,
    VALUE_CHANNELS,
    BoundParams,
    ParamStore,
    aaf,
    enforce_aaf_floor,
    generator_forward,
    init_generator_params,
    init_value_params,
    load_checkpoint,
    save_checkpoint,
    value_apply,
    value_forward,
)

from gradcheck import numeric_grad, rel_err


class TestAaf:
    def test_equal_weights_at_zero(self):
        w = (0.2, 0.2, 0.2, 0.2, 0.2)
        expect = 0.2 * math.log(2.0) / math.sqrt(0.2)
        assert aaf(0.0, w) == pytest.approx(expect, rel=1e-12)

    def test_scale_invariance_power_of_two(self):
        w = np.array([0.2, 0.1, 0.4, 0.05, 0.3])
        for x in (-1.7, 0.0, 0.9):
            assert aaf(x, w) == aaf(x, 4.0 * w)  # bitwise for power-of-two scale

    def test_scale_invariance_generic(self):
        w = np.array([0.2, 0.1, 0.4, 0.05, 0.3])
        for x in (-1.7, 0.0, 0.9):
            assert aaf(x, 3.0 * w) == pytest.approx(aaf(x, w), rel=1e-14)

    def test_single_basis_selection(self):
        assert aaf(1.0, (1.0, 0, 0, 0, 0)) == pytest.approx(math.sin(1.0), rel=1e-15)

    def test_floor_guard(self):
        store = init_value_params(seed=0)
        store.set("aaf.2", np.full(5, 1e-9))
        enforce_aaf_floor(store)
        assert np.linalg.norm(store.get("aaf.2")) >= 1e-6 * (1 - 1e-12)
        # untouched weights stay bitwise identical
        assert np.array_equal(store.get("aaf.1"), np.array(AAF_INIT))


class TestInit:
    def test_aaf_weights_exact(self):
        store = init_value_params(seed=7, gate_init=0.25)
        for i in (1, 2, 3, 4):
            assert store.get(f"aaf.{i}").tolist() == [0.2, 0.2, 0.2, 0.2, 0.2]

    def test_gate_init_values(self):
        assert init_value_params(seed=1, gate_init=1.2).get("gate")[0] == 1.2
        assert init_value_params(seed=1, gate_init=0.25).get("gate")[0] == 0.25
        assert init_value_params(seed=1, gate_init=0.0).get("gate")[0] == 0.0

    def test_same_seed_identical(self):
        a = init_value_params(seed=11, gate_init=0.25)
        b = init_value_params(seed=11, gate_init=0.25)
        assert np.array_equal(a.vector, b.vector)

    def test_zero_biases(self):
        store = init_value_params(seed=3)
        for ch in VALUE_CHANNELS:
            assert np.all(store.get(f"exp.{ch}.b") == 0.0)
        assert np.all(store.get("backbone.1.b") == 0.0)
        assert np.all(store.get("head.call.b") == 0.0)

    def test_expansion_gain_bounds(self):
        store = init_value_params(seed=3)
        limit = 0.01 * math.sqrt(6.0 / 51.0)
        w = store.get("exp.x.w")
        assert np.all(np.abs(w) <= limit)
        assert np.any(np.abs(w) > 0.1 * limit)

    def test_near_zero_outputs_after_init(self):
        store = init_value_params(seed=42, gate_init=0.25)
        rng = np.random.default_rng(0)
        for _ in range(100):
            args = rng.uniform(0.0, 1.5, size=6)
            e = rng.normal(size=5)
            assert abs(value_forward(store, *args, e, "call")) < 1.0


class TestValueForward:
    def test_gate_zero_sentiment_nullity_bitwise(self):
        store = init_value_params(seed=5, gate_init=0.0)
        args = (0.1, 95.0, 100.0, 0.25, 0.2, 0.0)
        u1 = value_forward(store, *args, np.array([1.0, 2.0, -3.0, 0.5, 4.0]), "call")
        u2 = value_forward(store, *args, np.array([-7.0, 0.0, 9.9, 1.5, -2.0]), "call")
        assert u1 == u2

    def test_deterministic_replay(self):
        store = init_value_params(seed=5, gate_init=0.25)
        args = (0.1, 95.0, 100.0, 0.25, 0.2, 0.0)
        e = np.array([0.3, 0.0, 0.1, -1.0, 0.69])
        assert value_forward(store, *args, e, "put") == value_forward(store, *args, e, "put")

    def test_non_finite_rejected(self):
        store = init_value_params(seed=5)
        with pytest.raises(DataError):
            value_forward(store, 0.0, math.nan, 100.0, 0.25, 0.2, 0.0, np.zeros(5), "call")
        with pytest.raises(DataError):
            value_forward(store, 0.0, 100.0, 100.0, 0.25, math.inf, 0.0, np.zeros(5), "call")

    def test_bad_kind_rejected(self):
        store = init_value_params(seed=5)
        with pytest.raises(ConfigError):
            value_forward(store, 0.0, 1.0, 1.0, 0.25, 0.2, 0.0, np.zeros(5), "straddle")

    def test_head_isolation(self):
        store = init_value_params(seed=5, gate_init=0.25)
        args = (0.1, 95.0, 100.0, 0.25, 0.2, 0.0)
        e = np.zeros(5)
        call_before = value_forward(store, *args, e, "call")
        put_before = value_forward(store, *args, e, "put")
        store.set("head.put.w", store.get("head.put.w") + 0.7)
        assert value_forward(store, *args, e, "call") == call_before
        assert value_forward(store, *args, e, "put") != put_before

    def test_dropout_only_in_training_mode(self):
        store = init_value_params(seed=5, gate_init=0.25)
        tape = Tape()
        bp = BoundParams(tape, store)
        xs = {ch: tape.constant(np.array([0.5])) for ch in VALUE_CHANNELS}
        e = tape.constant(np.zeros((1, 5)))
        eval1, _ = value_apply(bp, xs, e, rng=None)
        eval2, _ = value_apply(bp, xs, e, rng=None)
        train, _ = value_apply(bp, xs, e, rng=np.random.default_rng(1))
        assert eval1.value[0] == eval2.value[0]
        assert train.value[0] != eval1.value[0]


class TestGeneratorForward:
    def test_gate_zero_sentiment_nullity(self):
        store = init_generator_params(seed=6, gate_init=0.0)
        args = (0.1, 95.0, 4.0, 0.5, 100.0, 0.25, 0.2, 0.0)
        g1 = generator_forward(store, *args, np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
        g2 = generator_forward(store, *args, np.zeros(5))
        assert g1 == g2

    def test_deterministic_replay(self):
        store = init_generator_params(seed=6, gate_init=1.2)
        args = (0.1, 95.0, 4.0, 0.5, 100.0, 0.25, 0.2, 0.0)
        e = np.ones(5)
        assert generator_forward(store, *args, e) == generator_forward(store, *args, e)

    def test_grad_wrt_y_matches_fd(self):
        store = init_generator_params(seed=6, gate_init=0.25)
        base = dict(t=0.1, x=1.1, y=0.8, z=0.4, k=1.0, tau=0.25, sigma=0.2, r=0.0)
        e = np.array([0.2, -0.1, 0.3, 0.0, 0.5])

        from fbsde_pricer.nets import GEN_CHANNELS, generator_apply

        tape = Tape()
        bp = BoundParams(tape, store)
        xs = {name: tape.variable(np.array([v])) for name, v in base.items()}
        ev = tape.constant(e.reshape(1, 5))
        out = generator_apply(bp, xs, ev, rng=None)
        g = backward(tape, out.i)[xs["y"].i][0]

        def f(v):
            kw = dict(base)
            kw["y"] = v[0]
            return generator_forward(store, kw["t"], kw["x"], kw["y"], kw["z"],
                                     kw["k"], kw["tau"], kw["sigma"], kw["r"], e)

        fd = numeric_grad(f, [base["y"]])[0]
        assert rel_err(g, fd) < 1e-4


class TestFullNetGradients:
    def test_value_net_input_gradients_match_fd(self):
        store = init_value_params(seed=9, gate_init=0.25)
        point = dict(t=0.3, x=1.2, k=1.0, tau=0.5, sigma=0.25, r=0.02)
        e0 = np.array([0.1, -0.2, 0.3, 0.4, -0.5])

        tape = Tape()
        bp = BoundParams(tape, store)
        xs = {name: tape.variable(np.array([v])) for name, v in point.items()}
        ev = tape.variable(e0.reshape(1, 5))
        u_call, _ = value_apply(bp, xs, ev, rng=None)
        grads = backward(tape, u_call.i)
        got = np.array([grads[xs[n].i][0] for n in VALUE_CHANNELS]
                       + list(grads[ev.i].ravel()))

        def f(v):
            return value_forward(store, v[0], v[1], v[2], v[3], v[4], v[5], v[6:], "call")

        flat = np.array([point[n] for n in VALUE_CHANNELS] + list(e0))
        fd = numeric_grad(f, flat)
        assert rel_err(got, fd) < 1e-4

    def test_value_net_param_gradients_match_fd(self):
        store = init_value_params(seed=9, gate_init=0.25)
        point = dict(t=0.3, x=1.2, k=1.0, tau=0.5, sigma=0.25, r=0.02)
        e0 = np.zeros(5)

        tape = Tape()
        bp = BoundParams(tape, store)
        xs = {name: tape.constant(np.array([v])) for name, v in point.items()}
        ev = tape.constant(e0.reshape(1, 5))
        u_call, _ = value_apply(bp, xs, ev, rng=None)
        gvec = bp.grad_vector(backward(tape, u_call.i))

        rng = np.random.default_rng(1)
        idx = rng.choice(store.size, size=25, replace=False)
        h = 1e-5
        for k in idx:
            saved = store.vector[k]
            store.vector[k] = saved + h
            up = value_forward(store, *[point[n] for n in VALUE_CHANNELS], e0, "call")
            store.vector[k] = saved - h
            dn = value_forward(store, *[point[n] for n in VALUE_CHANNELS], e0, "call")
            store.vector[k] = saved
            fd = (up - dn) / (2 * h)
            assert rel_err(gvec[k], fd, floor=1e-7) < 1e-3, f"param {k}"


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        vs = init_value_params(seed=1, gate_init=0.25)
        gs = init_generator_params(seed=2, gate_init=0.25)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"value": vs, "generator": gs}, {"stage": "pretrain"})
        stores, meta = load_checkpoint(path)
        assert np.array_equal(stores["value"].vector, vs.vector)
        assert np.array_equal(stores["generator"].vector, gs.vector)
        assert meta == {"stage": "pretrain"}
        assert stores["value"].layout == vs.layout

    def test_file_bytes_deterministic(self, tmp_path):
        vs = init_value_params(seed=1)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, {"value": vs}, {"k": 1})
        save_checkpoint(p2, {"value": vs}, {"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_not_a_checkpoint_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"hello world")
        with pytest.raises(DataError):
            load_checkpoint(p)
