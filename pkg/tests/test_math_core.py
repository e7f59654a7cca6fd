import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, relative_error
from uncsens.autodiff import Tape, backpropagate, reverse_gradient
from uncsens.model import stacked_forward_tape
from uncsens.optim import AdamState, adam_step, clip_by_global_norm
from uncsens.rng import RngStream, derive_stream_id, gaussian_draw, gaussian_draws


class TestRngStream:
    def test_degenerate_variance_returns_mean_exactly(self):
        assert gaussian_draw(RngStream(1), 3.5, 0.0) == 3.5

    def test_same_triple_same_draw(self):
        a = gaussian_draw(RngStream(1, 0, 0), 0.0, 1.0)
        b = gaussian_draw(RngStream(1, 0, 0), 0.0, 1.0)
        assert a == b

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            gaussian_draw(RngStream(1), 0.0, -1e-3)
        with pytest.raises(ValueError):
            gaussian_draws(RngStream(1), np.zeros(2), np.array([1.0, -1.0]))

    def test_moments_of_a_million_draws(self):
        x = RngStream(2024).normals(10**6)
        assert abs(x.mean()) <= 0.005
        assert abs(x.var() - 1.0) <= 0.01

    def test_counter_advances_deterministically(self):
        s = RngStream(7, 3)
        s.normals(5)
        assert s.counter == 6  # Box-Muller consumes words in pairs
        s.uniforms(3)
        assert s.counter == 9

    @pytest.mark.parametrize("start", [0, 1, 2, 3, 5, 10])
    def test_draw_at_counter_matches_sequential(self, start):
        full = RngStream(11, 4).uniforms(start + 9)
        resumed = RngStream(11, 4, counter=start).uniforms(9)
        np.testing.assert_array_equal(full[start:], resumed)

    def test_split_requests_match_single_request(self):
        s = RngStream(5)
        parts = np.concatenate([s.normals(4), s.normals(6)])
        np.testing.assert_array_equal(parts, RngStream(5).normals(10))

    def test_distinct_streams_are_uncorrelated(self):
        a = RngStream(9, 1).normals(200_000)
        b = RngStream(9, 2).normals(200_000)
        assert not np.array_equal(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 5 / math.sqrt(200_000)

    def test_substreams_are_keyed_by_labels(self):
        root = RngStream(3)
        assert root.substream("a", 1).stream_id == root.substream("a", 1).stream_id
        assert root.substream("a", 1).stream_id != root.substream("a", 2).stream_id
        assert derive_stream_id(0, "x") != derive_stream_id(1, "x")

    def test_uniforms_in_unit_interval(self):
        u = RngStream(1).uniforms(100_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.005

    def test_permutation_is_a_permutation(self):
        p = RngStream(1).permutation(1000)
        np.testing.assert_array_equal(np.sort(p), np.arange(1000))
        np.testing.assert_array_equal(p, RngStream(1).permutation(1000))


class TestAdam:
    def test_zero_gradient_is_a_fixed_point(self):
        params = np.array([1.0, -2.0, 3.0])
        out, _ = adam_step(AdamState.zeros_like(params), params, np.zeros(3))
        np.testing.assert_array_equal(out, params)

        state = AdamState.zeros_like(params)
        state.first_moment[:] = 0.5
        state.second_moment[:] = 0.25
        _, state = adam_step(state, params, np.zeros(3))
        np.testing.assert_allclose(state.first_moment, 0.45)
        np.testing.assert_allclose(state.second_moment, 0.25 * 0.999)

    def test_first_step_hand_evaluated(self):
        # m = 0.1, v = 0.001; bias-corrected both equal 1, so the step is lr / (1 + eps)
        state = AdamState.zeros_like(np.zeros(1), learning_rate=0.001)
        out, state = adam_step(state, np.array([0.0]), np.array([1.0]))
        assert out[0] == pytest.approx(-0.001 / (1.0 + 1e-8), rel=1e-12)
        assert state.step == 1

    def test_constant_gradient_moves_monotonically(self):
        state = AdamState.zeros_like(np.zeros(1))
        p = np.zeros(1)
        trace = []
        for _ in range(50):
            p, state = adam_step(state, p, np.array([-2.5]))
            trace.append(p[0])
        assert np.all(np.diff(trace) > 0)
        assert state.step == 50

    @given(st.floats(min_value=-1e3, max_value=1e3).filter(lambda g: abs(g) > 1e-6))
    @settings(max_examples=100, deadline=None)
    def test_first_update_direction_is_minus_sign_of_gradient(self, g):
        state = AdamState.zeros_like(np.zeros(1))
        out, _ = adam_step(state, np.zeros(1), np.array([g]))
        assert np.sign(out[0]) == -np.sign(g)

    def test_shape_mismatch(self):
        state = AdamState.zeros_like(np.zeros(3))
        with pytest.raises(ValueError):
            adam_step(state, np.zeros(3), np.zeros(2))

    def test_global_norm_clipping(self):
        g = np.array([300.0, 400.0])
        np.testing.assert_allclose(clip_by_global_norm(g, 100.0), [60.0, 80.0])
        np.testing.assert_array_equal(clip_by_global_norm(g / 10, 100.0), g / 10)


def _scalar_grad(build, x):
    tape = Tape()
    xv = tape.variable(x)
    out = build(tape, xv)
    (g,) = reverse_gradient(tape, out)
    return g


class TestReverseGradient:
    def test_identity(self):
        assert _scalar_grad(lambda t, x: x, np.array(1.7)) == 1.0

    def test_relu_derivative_at_zero_is_zero(self):
        assert _scalar_grad(lambda t, x: t.relu(x), np.array(0.0)) == 0.0
        assert _scalar_grad(lambda t, x: t.relu(x), np.array(1e-300)) == 1.0

    def test_non_scalar_output_requires_index(self):
        tape = Tape()
        x = tape.variable(np.ones(3))
        y = x * 2.0
        with pytest.raises(ValueError):
            reverse_gradient(tape, y)
        (g,) = reverse_gradient(tape, y, output_index=1)
        np.testing.assert_array_equal(g, [0.0, 2.0, 0.0])

    def test_unused_input_gets_zero_gradient(self):
        tape = Tape()
        a = tape.variable(2.0)
        b = tape.variable(3.0)
        ga, gb = reverse_gradient(tape, a * a)
        assert ga == 4.0 and gb == 0.0

    def test_safe_sqrt_conventions(self):
        assert _scalar_grad(lambda t, x: t.safe_sqrt(x), np.array(0.0)) == 0.0
        assert _scalar_grad(lambda t, x: t.safe_sqrt(x), np.array(4.0)) == pytest.approx(0.25)

    @pytest.mark.parametrize("seed", range(10))
    def test_two_layer_network_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        layers = [rng.normal(size=(1, 6, 6)), rng.normal(size=(1, 2, 7))]
        x0 = rng.normal(size=4)

        def net(tape, x):
            inp = tape.reshape(tape.concat([x, np.array([0.3])]), (1, 1, 5))
            return stacked_forward_tape(tape, inp, [tape.constant(w) for w in layers])

        for k in range(2):
            def f(x, k=k):
                t = Tape()
                return net(t, t.constant(x)).value[0, 0, k]

            tape = Tape()
            xv = tape.variable(x0)
            out = net(tape, xv)
            (g,) = reverse_gradient(tape, out, output_index=(0, 0, k))
            assert relative_error(g, central_difference(f, x0)) <= 1e-5

    def test_reductions_and_shape_ops_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(3, 4))
        idx = np.array([2, 0, 2])

        def build(t, x):
            a = t.logsumexp(x * 1.5, axis=1)  # (3,)
            b = t.mean(t.square(x), axis=0)  # (4,)
            c = t.take(t.exp(x * 0.1), idx, axis=1)  # (3, 3)
            d = t.swapaxes(t.broadcast_to(b, (2, 4)), 0, 1)  # (4, 2)
            e = t.safe_sqrt(t.square(x) + 1.0) / (t.exp(x) + 2.0)
            return t.sum(a) + t.sum(d * d) + t.sum(c @ t.reshape(a, (3, 1))) - t.sum(t.log(1.0 + e))

        g = _scalar_grad(build, x0)
        assert relative_error(g, central_difference(lambda x: _value(build, x), x0)) <= 1e-6

    def test_backpropagate_with_cotangent(self):
        tape = Tape()
        x = tape.variable(np.array([1.0, 2.0]))
        y = x * x
        (g,) = backpropagate(tape, y, np.array([1.0, 10.0]))
        np.testing.assert_array_equal(g, [2.0, 40.0])

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_random_network_gradients(self, seed):
        """Gradient correctness on random configurations, away from ReLU kinks."""
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 5))
        h = int(rng.integers(1, 9))
        layers = [rng.normal(size=(2, h, d + 1)), rng.normal(size=(2, 1, h + 1))]
        x0 = rng.normal(size=d)

        def net(t, x):
            inp = t.broadcast_to(t.reshape(x, (1, 1, d)), (2, 3, d))
            return t.sum(t.square(stacked_forward_tape(t, inp, [t.constant(w) for w in layers])))

        pre = np.append(x0, 1.0) @ layers[0][0].T
        if np.min(np.abs(pre)) < 1e-3:
            return  # too close to a kink for a finite-difference comparison
        g = _scalar_grad(net, x0)
        assert relative_error(g, central_difference(lambda x: _value(net, x), x0), floor=1e-6) <= 1e-4


def _value(build, x):
    t = Tape()
    return build(t, t.constant(x)).value
