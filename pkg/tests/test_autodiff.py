"""Tape, op semantics, gradient checks, and the Adam update rule."""

import numpy as np
import pytest

import freqlens.autodiff as ad
from freqlens.autodiff import (AdamState, NumericalError, ShapeError, Tensor,
                               adam_step, backward, grad_check, no_grad,
                               reset_tape, tape_size, tensor, use_dtype)
from freqlens.fourier import FreqFilterSpec, filter_array

from reference import (reference_avgpool2, reference_conv2d_same, scalar_adam)


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


def t64(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

class TestForward:
    def test_add_sub_mul_equal_shapes(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((3, 4)), rng.random((3, 4))
        assert np.allclose(ad.add(Tensor(a), Tensor(b)).data, a + b)
        assert np.allclose(ad.sub(Tensor(a), Tensor(b)).data, a - b)
        assert np.allclose(ad.mul(Tensor(a), Tensor(b)).data, a * b)

    def test_scalar_broadcast(self):
        a = np.arange(6.0).reshape(2, 3)
        assert np.allclose(ad.add(Tensor(a), 2.0).data, a + 2)
        assert np.allclose(ad.mul(3.0, Tensor(a)).data, 3 * a)
        assert np.allclose(ad.sub(Tensor(a), 1.5).data, a - 1.5)

    def test_batch_bias_broadcast(self):
        a = np.ones((4, 3))
        b = np.array([1.0, 2.0, 3.0])
        out = ad.add(Tensor(a), Tensor(b))
        assert np.allclose(out.data, a + b)

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        with pytest.raises(ShapeError):
            ad.mul(Tensor(np.ones((4, 3))), Tensor(np.ones(3)))  # no batch mode for mul

    def test_operator_sugar(self):
        a = Tensor(np.array([1.0, -2.0]))
        b = Tensor(np.array([3.0, 5.0]))
        assert np.allclose((a + b).data, [4.0, 3.0])
        assert np.allclose((a - b).data, [-2.0, -7.0])
        assert np.allclose((a * b).data, [3.0, -10.0])
        assert np.allclose((-a).data, [-1.0, 2.0])
        assert np.allclose((2.0 * a).data, [2.0, -4.0])

    def test_matmul(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((3, 4)), rng.random((4, 5))
        assert np.allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b)
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(a), Tensor(a))

    def test_dense_flattens_input(self):
        rng = np.random.default_rng(2)
        x = rng.random((2, 3, 4, 4))
        w = rng.random((48, 7))
        b = rng.random(7)
        out = ad.dense(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, x.reshape(2, -1) @ w + b)

    def test_dense_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.dense(Tensor(np.ones(5)), Tensor(np.ones((5, 2))), Tensor(np.ones(2)))
        with pytest.raises(ShapeError):
            ad.dense(Tensor(np.ones((2, 5))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))
        with pytest.raises(ShapeError):
            ad.dense(Tensor(np.ones((2, 5))), Tensor(np.ones((5, 2))), Tensor(np.ones(3)))

    def test_conv2d_matches_direct_loops(self):
        rng = np.random.default_rng(3)
        x = rng.random((2, 3, 6, 6))
        w = rng.random((4, 3, 3, 3))
        b = rng.random(4)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        expect = np.stack([reference_conv2d_same(xi, w, b) for xi in x])
        assert np.max(np.abs(out - expect)) < 1e-12

    def test_conv2d_5x5_kernel(self):
        rng = np.random.default_rng(4)
        x = rng.random((1, 2, 8, 8))
        w = rng.random((3, 2, 5, 5))
        b = np.zeros(3)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.max(np.abs(out[0] - reference_conv2d_same(x[0], w, b))) < 1e-12

    def test_conv2d_rejects_even_kernel(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))),
                      Tensor(np.zeros(1)))

    def test_avgpool2_matches_reference(self):
        rng = np.random.default_rng(5)
        x = rng.random((2, 3, 8, 6))
        out = ad.avgpool2(Tensor(x)).data
        expect = np.stack([reference_avgpool2(xi) for xi in x])
        assert np.max(np.abs(out - expect)) < 1e-12

    def test_avgpool2_rejects_odd(self):
        with pytest.raises(ShapeError):
            ad.avgpool2(Tensor(np.ones((1, 1, 5, 4))))

    def test_pointwise_activations(self):
        x = np.linspace(-3, 3, 13)
        assert np.allclose(ad.relu(Tensor(x)).data, np.maximum(x, 0))
        assert np.allclose(ad.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)))
        assert np.allclose(ad.tanh(Tensor(x)).data, np.tanh(x))
        assert np.allclose(ad.clip(Tensor(x), -1, 1).data, np.clip(x, -1, 1))

    def test_clip_rejects_bad_range(self):
        with pytest.raises(ValueError):
            ad.clip(Tensor(np.ones(3)), 1.0, 1.0)

    def test_softmax_cross_entropy_value(self):
        logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
        labels = np.array([0, 2])
        out = ad.softmax_cross_entropy(Tensor(logits), labels)
        lse = np.log(np.exp(logits).sum(axis=1))
        expect = np.mean(lse - logits[[0, 1], labels])
        assert abs(float(out.data) - expect) < 1e-12

    def test_softmax_cross_entropy_validation(self):
        with pytest.raises(ShapeError):
            ad.softmax_cross_entropy(Tensor(np.ones(3)), np.array([0]))
        with pytest.raises(ValueError):
            ad.softmax_cross_entropy(Tensor(np.ones((2, 3))), np.array([0.5, 1.0]))
        with pytest.raises(ValueError):
            ad.softmax_cross_entropy(Tensor(np.ones((2, 3))), np.array([0, 3]))

    def test_softmax_cross_entropy_stable_at_large_logits(self):
        logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
        out = ad.softmax_cross_entropy(Tensor(logits), np.array([0, 1]))
        assert np.isfinite(out.data)
        assert float(out.data) < 1e-6

    def test_reductions(self):
        x = np.array([[1.0, -2.0], [3.0, -4.0]])
        assert float(ad.l1_norm(Tensor(x)).data) == 10.0
        assert float(ad.l2_sq(Tensor(x)).data) == 30.0
        assert float(ad.mean_abs(Tensor(x)).data) == 2.5

    def test_smoothness_penalty_value(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]])
        # row diffs: (2-0)^2 + (3-1)^2 = 8; col diffs: (1-0)^2 + (3-2)^2 = 2
        out = ad.smoothness_penalty(Tensor(x))
        assert float(out.data) == pytest.approx(10.0)
        assert float(ad.smoothness_penalty(Tensor(np.full((3, 5), 2.0))).data) == 0.0

    def test_freq_filter_matches_fourier_module(self):
        rng = np.random.default_rng(6)
        x = rng.random((2, 3, 8, 8))
        f = FreqFilterSpec("low_pass", 4)
        out = ad.freq_filter(Tensor(x), f).data
        assert np.max(np.abs(out - filter_array(x, f))) < 1e-6

    def test_forward_op_dispatch(self):
        out = ad.forward_op("relu", [Tensor(np.array([-1.0, 2.0]))])
        assert np.allclose(out.data, [0.0, 2.0])
        with pytest.raises(ValueError):
            ad.forward_op("no_such_op", [])


# ---------------------------------------------------------------------------
# gradients: every op against central differences (64-bit)
# ---------------------------------------------------------------------------

class TestGradients:
    def check(self, f, x, tol=1e-6):
        with use_dtype(np.float64):
            assert grad_check(f, x, h=1e-5) < tol

    def test_add(self):
        rng = np.random.default_rng(10)
        c = Tensor(rng.random((3, 4)))
        self.check(lambda t: ad.l2_sq(ad.add(t, c)), t64(rng.random((3, 4))))

    def test_add_bias_mode(self):
        rng = np.random.default_rng(11)
        c = Tensor(rng.random((4, 3)))
        self.check(lambda t: ad.l2_sq(ad.add(c, t)), t64(rng.random(3)))

    def test_sub(self):
        rng = np.random.default_rng(12)
        c = Tensor(rng.random((3, 4)))
        self.check(lambda t: ad.l2_sq(ad.sub(c, t)), t64(rng.random((3, 4))))

    def test_mul_elementwise(self):
        rng = np.random.default_rng(13)
        c = Tensor(rng.random((3, 4)) + 0.5)
        self.check(lambda t: ad.l2_sq(ad.mul(t, c)), t64(rng.random((3, 4))))

    def test_mul_scalar(self):
        rng = np.random.default_rng(14)
        c = Tensor(rng.random((2, 5)))
        self.check(lambda t: ad.l2_sq(ad.mul(c, t)), t64(0.7))

    def test_matmul(self):
        rng = np.random.default_rng(15)
        c = Tensor(rng.random((4, 2)))
        self.check(lambda t: ad.l2_sq(ad.matmul(t, c)), t64(rng.random((3, 4))))

    def test_dense_all_inputs(self):
        rng = np.random.default_rng(16)
        x = rng.random((2, 6))
        w = rng.random((6, 3))
        b = rng.random(3)
        self.check(lambda t: ad.l2_sq(ad.dense(t, Tensor(w), Tensor(b))), t64(x))
        self.check(lambda t: ad.l2_sq(ad.dense(Tensor(x), t, Tensor(b))), t64(w))
        self.check(lambda t: ad.l2_sq(ad.dense(Tensor(x), Tensor(w), t)), t64(b))

    def test_conv2d_all_inputs(self):
        rng = np.random.default_rng(17)
        x = rng.random((2, 2, 5, 5))
        w = rng.random((3, 2, 3, 3)) * 0.5
        b = rng.random(3)
        self.check(lambda t: ad.l2_sq(ad.conv2d(t, Tensor(w), Tensor(b))), t64(x))
        self.check(lambda t: ad.l2_sq(ad.conv2d(Tensor(x), t, Tensor(b))), t64(w))
        self.check(lambda t: ad.l2_sq(ad.conv2d(Tensor(x), Tensor(w), t)), t64(b))

    def test_avgpool2(self):
        rng = np.random.default_rng(18)
        self.check(lambda t: ad.l2_sq(ad.avgpool2(t)), t64(rng.random((2, 2, 4, 4))))

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(19)
        x = rng.random((3, 4)) + 0.2  # strictly positive side
        self.check(lambda t: ad.l2_sq(ad.relu(t)), t64(x))
        xneg = -rng.random((3, 4)) - 0.2
        self.check(lambda t: ad.l2_sq(ad.relu(t)), t64(xneg))

    def test_sigmoid(self):
        rng = np.random.default_rng(20)
        self.check(lambda t: ad.l2_sq(ad.sigmoid(t)), t64(rng.standard_normal((3, 4))))

    def test_tanh(self):
        rng = np.random.default_rng(21)
        self.check(lambda t: ad.l2_sq(ad.tanh(t)), t64(rng.standard_normal((3, 4))))

    def test_clip_interior(self):
        rng = np.random.default_rng(22)
        x = rng.uniform(-0.8, 0.8, (3, 4))
        self.check(lambda t: ad.l2_sq(ad.clip(t, -1.0, 1.0)), t64(x))

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(23)
        labels = np.array([0, 2, 1])
        self.check(lambda t: ad.softmax_cross_entropy(t, labels),
                   t64(rng.standard_normal((3, 4))))

    def test_l1_norm_away_from_zero(self):
        rng = np.random.default_rng(24)
        x = rng.uniform(0.3, 1.0, (3, 4)) * np.where(rng.random((3, 4)) < 0.5, -1, 1)
        self.check(lambda t: ad.l1_norm(t), t64(x))

    def test_l2_sq(self):
        rng = np.random.default_rng(25)
        self.check(lambda t: ad.l2_sq(t), t64(rng.standard_normal((4, 4))))

    def test_mean_abs(self):
        rng = np.random.default_rng(26)
        x = rng.uniform(0.3, 1.0, (3, 4))
        self.check(lambda t: ad.mean_abs(t), t64(x))

    def test_smoothness_penalty(self):
        rng = np.random.default_rng(27)
        self.check(lambda t: ad.smoothness_penalty(t), t64(rng.random((2, 5, 5))))

    def test_freq_filter(self):
        rng = np.random.default_rng(28)
        f = FreqFilterSpec("high_pass", 3)
        self.check(lambda t: ad.l2_sq(ad.freq_filter(t, f)), t64(rng.random((2, 6, 6))))

    def test_float32_tolerance(self):
        # default dtype path: looser bound, larger step
        rng = np.random.default_rng(29)
        x = Tensor(rng.random((2, 2, 5, 5)).astype(np.float32), requires_grad=True)
        w = Tensor((rng.random((3, 2, 3, 3)) * 0.5).astype(np.float32))
        b = Tensor(rng.random(3).astype(np.float32))
        err = grad_check(lambda t: ad.mean_abs(ad.conv2d(t, w, b)), x, h=1e-2)
        assert err < 5e-2

    def test_grad_check_requires_grad(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: ad.l2_sq(t), Tensor(np.ones(3)))

    def test_grad_check_rejects_unused_input(self):
        c = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            grad_check(lambda t: ad.l2_sq(ad.mul(c, 2.0)), t64(np.ones(3)))


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------

class TestBackward:
    def test_shared_subexpression_accumulates(self):
        x = t64(np.array([1.0, 2.0]))
        y = ad.add(x, x)
        grads = backward(ad.l1_norm(y))
        assert np.allclose(grads[x], [2.0, 2.0])

    def test_diamond_graph(self):
        x = t64(np.array(3.0))
        y = ad.mul(x, x)  # x^2, dy/dx = 6
        grads = backward(y)
        assert np.allclose(grads[x], 6.0)

    def test_named_params(self):
        x = t64(np.ones((2, 3)))
        w = t64(np.ones((3, 2)))
        loss = ad.l2_sq(ad.matmul(x, w))
        grads = backward(loss, {"x": x, "w": w})
        assert set(grads) == {"x", "w"}
        assert grads["w"].shape == (3, 2)

    def test_detached_param_warns_and_zeros(self):
        x = t64(np.ones(3))
        stray = t64(np.ones(2))
        loss = ad.l2_sq(x)
        with pytest.warns(UserWarning):
            grads = backward(loss, {"x": x, "stray": stray})
        assert np.allclose(grads["stray"], 0.0)

    def test_non_scalar_loss_rejected(self):
        x = t64(np.ones(3))
        y = ad.relu(x)
        with pytest.raises(ShapeError):
            backward(y)
        reset_tape()

    def test_tape_cleared_after_backward(self):
        x = t64(np.ones(3))
        backward(ad.l2_sq(x))
        assert tape_size() == 0

    def test_no_grad_builds_no_tape(self):
        x = t64(np.ones(3))
        with no_grad():
            y = ad.l2_sq(ad.relu(x))
        assert tape_size() == 0
        assert not y.requires_grad

    def test_loss_without_grad_warns(self):
        x = Tensor(np.ones(3))
        y = ad.l2_sq(x)
        with pytest.warns(UserWarning):
            grads = backward(y)
        assert grads == {}

    def test_detach_breaks_graph(self):
        x = t64(np.ones(3))
        y = ad.mul(x, 2.0).detach()
        assert not y.requires_grad
        assert np.shares_memory(y.data, y.data)

    def test_grad_flows_through_deep_chain(self):
        x = t64(np.full((1, 1, 4, 4), 0.5))
        h = ad.relu(ad.conv2d(x, Tensor(np.full((1, 1, 3, 3), 0.2)), Tensor(np.zeros(1))))
        loss = ad.mean_abs(ad.avgpool2(h))
        grads = backward(loss)
        assert x in grads
        assert np.any(grads[x] != 0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class TestAdam:
    def test_matches_scalar_reference(self):
        # quadratic objective 0.5*(p - 3)^2, gradient recorded then replayed
        # through the independently written update rule
        p = Tensor(np.array(0.0, dtype=np.float64), requires_grad=True)
        state = AdamState(lr=0.1)
        gs, seen = [], []
        for _ in range(30):
            g = float(p.data) - 3.0
            gs.append(g)
            adam_step(state, {"p": np.asarray(g)}, {"p": p})
            seen.append(float(p.data))
        expect = scalar_adam(gs, lr=0.1, x0=0.0)
        assert np.allclose(seen, expect, atol=1e-12)

    def test_bias_correction_first_step(self):
        # after one step the update must equal lr * sign-ish g / (|g| + eps)
        p = Tensor(np.array(10.0, dtype=np.float64), requires_grad=True)
        adam_step(AdamState(lr=0.5), {"p": np.asarray(4.0)}, {"p": p})
        assert float(p.data) == pytest.approx(10.0 - 0.5 * 4.0 / (4.0 + 1e-8), rel=1e-9)

    def test_missing_grad_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            adam_step(AdamState(), {}, {"p": p})

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            adam_step(AdamState(), {"p": np.zeros(4)}, {"p": p})

    def test_state_persists_across_steps(self):
        p = Tensor(np.array(1.0, dtype=np.float64), requires_grad=True)
        state = AdamState(lr=0.1)
        adam_step(state, {"p": np.asarray(1.0)}, {"p": p})
        adam_step(state, {"p": np.asarray(1.0)}, {"p": p})
        assert state.step == 2
        assert "p" in state.m and "p" in state.v


# ---------------------------------------------------------------------------
# dtype switching
# ---------------------------------------------------------------------------

class TestDtype:
    def test_non_float_input_gets_default(self):
        assert tensor(np.arange(3)).data.dtype == np.float32
        assert ad.zeros((2, 2)).data.dtype == np.float32

    def test_float_inputs_keep_their_dtype(self):
        assert tensor(np.zeros(2, dtype=np.float64)).data.dtype == np.float64
        assert tensor(np.zeros(2, dtype=np.float32)).data.dtype == np.float32

    def test_use_dtype_context(self):
        with use_dtype(np.float64):
            assert ad.zeros(2).data.dtype == np.float64
            assert tensor([1, 2]).data.dtype == np.float64
        assert ad.zeros(2).data.dtype == np.float32

    def test_nested_contexts_restore(self):
        with use_dtype(np.float64):
            with use_dtype(np.float32):
                assert ad.zeros(1).data.dtype == np.float32
            assert ad.zeros(1).data.dtype == np.float64
