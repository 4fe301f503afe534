import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from builders import line_network
from gradcheck import relative_errors, route_loss, three_segment_case
from unite.conjugate import NonFinite, SampleStats, snll_and_grad
from unite.network import DAY_SECONDS, WEEK_SECONDS, FeatureScaler
from unite.neural import (
    HIDDEN,
    PARAM_SHAPES,
    AdamState,
    ModelParams,
    adam_step,
    backward,
    constrain,
    embed_time,
    forward_route,
    prior_function_layer,
)
from unite.training import TrainConfig, train


def zero_params(**kw):
    return ModelParams({k: np.zeros(s) for k, s in PARAM_SHAPES.items()}, **kw)


def h_for(h1, params):
    """A 64-vector h with h @ W_out == h1, using an identity block in W_out."""
    params.weights["W_out"][:4, :] = np.eye(4)
    h = np.zeros(64)
    h[:4] = h1
    return h


class TestEmbedTime:
    def test_first_and_last_slots(self):
        p = ModelParams.init(0)
        np.testing.assert_array_equal(
            embed_time(600.0, p), np.concatenate([p.weights["W_tod"][0], p.weights["W_dow"][0]])
        )
        np.testing.assert_array_equal(
            embed_time(WEEK_SECONDS - 60.0, p), np.concatenate([p.weights["W_tod"][95], p.weights["W_dow"][6]])
        )

    @given(st.integers(0, 7 * 96 - 1), st.floats(0, 899.999), st.floats(0, 899.999))
    def test_depends_only_on_slot_and_day(self, slot, a, b):
        p = ModelParams.init(1)
        base = slot * 900.0
        np.testing.assert_array_equal(embed_time(base + a, p), embed_time(base + b, p))
        day, tod = divmod(slot, 96)
        assert base + a == pytest.approx(day * DAY_SECONDS + tod * 900.0 + a)


class TestPriorFunctionLayer:
    def test_zero_projection(self):
        p = zero_params()
        assert prior_function_layer(np.zeros(64), p).astuple() == (0.0, 1.0 + 1e-6, 1e-6, 1e-6)

    def test_kappa_floor(self):
        p = zero_params()
        ng = prior_function_layer(h_for([0, -100, 1, 1], p), p)
        assert ng.kappa == pytest.approx(1e-6, rel=1e-9) and ng.kappa > 0

    def test_worked_example(self):
        p = zero_params()
        ng = prior_function_layer(h_for([5, 2, -3, 4], p), p)
        np.testing.assert_allclose(ng.astuple(), (5, 3 + 1e-6, 3 + 1e-6, 4 + 1e-6), rtol=1e-15)

    def test_fuzz_positive(self):
        rng = np.random.default_rng(0)
        h1 = rng.normal(0, 30, size=(100_000, 4))
        h1[::7] *= 1e3
        mu, k, a, b = constrain(h1, 1.0, 1e-6)
        assert np.all(np.isfinite(mu))
        assert np.all(k > 0) and np.all(a > 0) and np.all(b > 0)

    def test_nonfinite(self):
        p = zero_params()
        with pytest.raises(NonFinite):
            prior_function_layer(h_for([np.nan, 0, 0, 0], p), p)


class TestForward:
    def test_single_segment(self):
        priors, fwd = forward_route(["s1"], [0.0], ModelParams.init(0), line_network())
        assert len(priors) == 1 and fwd.tape.x.shape == (1, 1, 32)

    def test_all_zero_weights(self):
        priors, _ = forward_route(["s1", "s2", "s3"], [0.0, None, None], zero_params(), line_network())
        for ng in priors:
            assert ng.astuple() == (0.0, 1.0 + 1e-6, 1e-6, 1e-6)

    def test_arrival_propagation(self):
        p = zero_params()
        p.weights["W_out"][HIDDEN + 1, 0] = 10.0  # feature 1 equals 1.0 on every test segment
        _, fwd = forward_route(["s1", "s2"], [WEEK_SECONDS - 4.0, None], p, line_network())
        assert fwd.prior[0][0, 0] == 10.0
        assert fwd.tau[1, 0] == pytest.approx(6.0)  # 100 m at 10 m/s, wrapped

    def test_recorded_arrival_wins(self):
        _, fwd = forward_route(["s1", "s2"], [0.0, 500.0], ModelParams.init(0), line_network())
        assert fwd.tau[1, 0] == 500.0

    def test_posterior_leaves_hidden_state(self):
        p = ModelParams.init(3)
        net = line_network()
        hook = lambda step, tau: SampleStats(5, 20.0, 4.0)
        pri_a, fa = forward_route(["s1", "s2"], [0.0, 50.0], p, net)
        pri_b, fb = forward_route(["s1", "s2"], [0.0, 50.0], p, net, hook)
        assert pri_a == pri_b
        np.testing.assert_array_equal(fa.tape.z, fb.tape.z)
        assert not np.array_equal(fa.posterior[0], fb.posterior[0])

    def test_deterministic(self):
        p = ModelParams.init(3)
        a = forward_route(["s1", "s2", "s3"], [0.0, None, None], p, line_network())[0]
        b = forward_route(["s1", "s2", "s3"], [0.0, None, None], p, line_network())[0]
        assert a == b


class TestGradients:
    def test_gru_only_loss(self, small_data):
        tr, params, _ = three_segment_case(small_data, with_store=False)
        assert relative_errors(params, small_data.network, tr, None).max() < 1e-4

    def test_with_record_evidence(self, small_data):
        tr, params, store = three_segment_case(small_data)
        assert relative_errors(params, small_data.network, tr, store, seed=2).max() < 1e-4

    def test_unused_embedding_rows_get_zero(self, small_data):
        tr, params, store = three_segment_case(small_data)
        _, g, fwd = route_loss(params, small_data.network, tr, store, grad=True)
        used = {int(d) for d in np.floor(fwd.tau[:, 0] / DAY_SECONDS)}
        for day in set(range(7)) - used:
            assert not np.any(g["W_dow"][day])

    def test_linearity(self, small_data):
        tr, params, store = three_segment_case(small_data)
        _, g, fwd = route_loss(params, small_data.network, tr, store, grad=True)
        _, d = snll_and_grad(*fwd.prior, *fwd.stats, np.array(tr.speeds)[:, None])
        g2 = backward(params, fwd.tape, [2.0 * x for x in d])
        for k in g:
            np.testing.assert_allclose(g2[k], 2.0 * g[k], rtol=1e-14, atol=0)


class TestAdam:
    def test_zero_gradient_and_zero_lr(self):
        p = ModelParams.init(0)
        zero = p.zeros_like()
        q, _ = adam_step(p, zero, AdamState.zeros(p), 0.01)
        for k in p.weights:
            np.testing.assert_array_equal(q.weights[k], p.weights[k])
        grads = {k: np.ones_like(v) for k, v in p.weights.items()}
        q, _ = adam_step(p, grads, AdamState.zeros(p), 0.0)
        for k in p.weights:
            np.testing.assert_array_equal(q.weights[k], p.weights[k])

    def test_constant_gradient_gives_sign_steps(self):
        p = ModelParams.init(0)
        rng = np.random.default_rng(0)
        grads = {k: rng.normal(size=v.shape) for k, v in p.weights.items()}
        state = AdamState.zeros(p)
        for _ in range(200):
            prev = p
            p, state = adam_step(p, grads, state, 1e-3)
        for k in p.weights:
            step = prev.weights[k] - p.weights[k]
            # bias-corrected moments equal g and g^2, so the step is lr * g / (|g| + eps)
            np.testing.assert_allclose(step, 1e-3 * grads[k] / (np.abs(grads[k]) + 1e-8), rtol=1e-9)
            np.testing.assert_allclose(step, 1e-3 * np.sign(grads[k]), rtol=1e-4)

    def test_first_step_is_lr_sign(self):
        p = ModelParams.init(0)
        grads = {k: np.full(v.shape, -3.0) for k, v in p.weights.items()}
        q, state = adam_step(p, grads, AdamState.zeros(p), 0.5)
        assert state.t == 1
        np.testing.assert_allclose(q.weights["W_out"] - p.weights["W_out"], 0.5, rtol=1e-8)


class TestModelParams:
    def test_init_bounds(self):
        p = ModelParams.init(0)
        assert np.all(p.weights["gru_b"] == 0)
        bound = np.sqrt(6.0 / (32 + 32))
        assert np.abs(p.weights["gru_Wh"]).max() <= bound

    def test_shape_validation(self):
        w = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
        w["W_out"] = np.zeros((64, 3))
        with pytest.raises(ValueError):
            ModelParams(w)

    def test_checkpoint_round_trip(self, tmp_path, small_data):
        p = ModelParams.init(5, scaler=FeatureScaler.fit(small_data.network, small_data.train))
        p.save(tmp_path / "m.npz")
        q = ModelParams.load(tmp_path / "m.npz")
        for k in p.weights:
            np.testing.assert_array_equal(q.weights[k], p.weights[k])
        assert q.scaler == p.scaler and (q.a, q.epsilon) == (p.a, p.epsilon)

    def test_checkpoint_version_mismatch(self, tmp_path):
        p = ModelParams.init(5)
        p.save(tmp_path / "m.npz")
        with np.load(tmp_path / "m.npz") as z:
            items = dict(z)
        items["version"] = np.array(99)
        np.savez(tmp_path / "bad.npz", **items)
        with pytest.raises(ValueError, match="version"):
            ModelParams.load(tmp_path / "bad.npz")

    def test_one_epoch_bit_identical(self, small_data):
        cfg = TrainConfig(objective="unite-dis", lr=0.01, epochs=1, batch_size=16, seed=9)
        a = train(small_data.network, small_data.train, cfg).params
        b = train(small_data.network, small_data.train, cfg).params
        for k in a.weights:
            assert np.array_equal(a.weights[k], b.weights[k])
