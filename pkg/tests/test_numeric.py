import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from trire_utils.continual_system.core.exceptions import InputError, NumericError, ShapeError
from trire_utils.continual_system.core.numeric import (
    AdamState, MaskedAdam, adam_step, derive_rng, gradient_check, linear_backward, linear_forward, make_rng,
    matmul, per_sample_ce, relu_backward, relu_forward, softmax_ce, softmax_probs,
)

from conftest import numeric_gradient

class TestRandomStreams:
    def test_same_seed_same_draws(self):
        assert_array_equal(make_rng(7).random(5), make_rng(7).random(5))

    def test_derived_streams_depend_on_labels(self):
        a = derive_rng(3, "minibatch", 0, "retain", 1).random(4)
        b = derive_rng(3, "minibatch", 0, "retain", 1).random(4)
        c = derive_rng(3, "minibatch", 0, "retain", 2).random(4)
        assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_different_seeds_differ(self):
        assert not np.array_equal(derive_rng(0, "init").random(4), derive_rng(1, "init").random(4))

class TestMatmul:
    def test_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[1.0], [1.0]])
        assert_array_equal(matmul(a, b), [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            matmul(np.array([[np.inf, 1.0]]), np.array([[0.0], [1.0]]))

class TestLayers:
    def test_relu_zero_has_zero_subgradient(self):
        y, trace = relu_forward(np.array([[-1.0, 0.0, 2.0]]))
        assert_array_equal(y, [[0.0, 0.0, 2.0]])
        assert_array_equal(relu_backward(trace, np.ones((1, 3))), [[0.0, 0.0, 1.0]])

    def test_linear_backward_matches_finite_differences(self):
        rng = make_rng(0)
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        upstream = rng.normal(size=(4, 2))

        def loss_w(flat):
            y, _ = linear_forward(x, flat.reshape(3, 2), b)
            return float(np.sum(y * upstream))

        _, trace = linear_forward(x, w, b)
        grad_x, grad_w, grad_b = linear_backward(trace, w, upstream)
        assert_allclose(grad_w.reshape(-1), numeric_gradient(loss_w, w.reshape(-1)), rtol=1e-6, atol=1e-8)
        assert_allclose(grad_b, upstream.sum(axis=0))
        assert_allclose(grad_x, upstream @ w.T)

    def test_bias_shape_checked(self):
        with pytest.raises(ShapeError):
            linear_forward(np.ones((1, 3)), np.ones((3, 2)), np.ones(3))

class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = softmax_ce(np.zeros((2, 4)), np.array([0, 3]))
        assert loss == pytest.approx(np.log(4.0))
        assert_allclose(grad.sum(axis=1), [0.0, 0.0], atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = make_rng(1)
        logits = rng.normal(size=(3, 5))
        labels = np.array([1, 4, 0])
        _, grad = softmax_ce(logits, labels)
        numeric = numeric_gradient(lambda z: softmax_ce(z.reshape(3, 5), labels)[0], logits.reshape(-1))
        assert_allclose(grad.reshape(-1), numeric, rtol=1e-5, atol=1e-9)

    def test_masked_classes_get_zero_gradient(self):
        logits = make_rng(2).normal(size=(4, 6))
        mask = np.array([False, False, True, True, False, False])
        _, grad = softmax_ce(logits, np.array([2, 3, 3, 2]), mask)
        assert np.all(grad[:, ~mask] == 0.0)
        probs = softmax_probs(logits, mask)
        assert_allclose(probs.sum(axis=1), np.ones(4))
        assert np.all(probs[:, ~mask] == 0.0)

    def test_masked_loss_ignores_other_classes(self):
        logits = np.array([[0.0, 0.0, 100.0]])
        loss, _ = softmax_ce(logits, np.array([0]), np.array([True, True, False]))
        assert loss == pytest.approx(np.log(2.0))

    def test_label_in_masked_class_rejected(self):
        with pytest.raises(InputError):
            softmax_ce(np.zeros((1, 3)), np.array([2]), np.array([True, True, False]))

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            softmax_ce(np.zeros((1, 3)), np.array([3]))

    def test_empty_batch_rejected(self):
        with pytest.raises(InputError):
            softmax_ce(np.zeros((0, 3)), np.zeros(0, dtype=int))

    def test_large_logits_stay_finite(self):
        losses, probs = per_sample_ce(np.array([[1000.0, -1000.0]]), np.array([1]))
        assert np.isfinite(losses).all()
        assert losses[0] == pytest.approx(2000.0)
        assert np.isfinite(probs).all()

class TestAdam:
    def test_empty_mask_is_bitwise_noop(self):
        params = make_rng(0).normal(size=6)
        before = params.copy()
        state = AdamState.fresh(6)
        adam_step(params, np.ones(6), state, 0.1, np.zeros(6, dtype=bool))
        assert_array_equal(params, before)
        assert state.step_count == 0
        assert_array_equal(state.m, np.zeros(6))

    def test_masked_update_touches_only_selected(self):
        params = np.zeros(4)
        state = AdamState.fresh(4)
        mask = np.array([True, False, True, False])
        adam_step(params, np.array([1.0, 1.0, -1.0, 1.0]), state, 0.01, mask)
        # bias-corrected first step moves by lr * sign(g)
        assert_allclose(params, [-0.01, 0.0, 0.01, 0.0], atol=1e-9)
        assert_array_equal(state.steps, [1, 0, 1, 0])

    def test_unmasked_positions_keep_their_moments(self):
        params = np.zeros(2)
        state = AdamState.fresh(2)
        adam_step(params, np.array([1.0, 1.0]), state, 0.01)
        m_before = state.m[1]
        adam_step(params, np.array([5.0, 5.0]), state, 0.01, np.array([True, False]))
        assert state.m[1] == m_before
        assert_array_equal(state.steps, [2, 1])

    def test_masked_adam_logs_phase_and_rate(self):
        log = []
        opt = MaskedAdam(3, 0.0001, "revise", log)
        opt.step(np.zeros(3), np.ones(3))
        assert log == [("revise", 0.0001)]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(np.zeros(3), np.zeros(2), AdamState.fresh(3), 0.1)

class TestGradientCheck:
    def test_quadratic_passes(self):
        a = np.array([1.0, -2.0, 3.0])
        report = gradient_check(lambda p: (float(np.sum(a * p * p)), 2 * a * p), np.array([0.5, 0.1, -0.7]))
        assert report.passed
        assert report.max_error < 1e-6

    def test_wrong_gradient_fails(self):
        report = gradient_check(lambda p: (float(np.sum(p ** 2)), p), np.array([1.0, 2.0]))
        assert not report.passed

    def test_blocks_reported_separately(self):
        report = gradient_check(lambda p: (float(np.sum(p ** 2)), 2 * p), np.ones(4),
                                blocks={"a": slice(0, 2), "b": slice(2, 4)})
        assert set(report.errors) == {"a", "b"}

def test_saturated_cross_entropy():
    loss, grad = softmax_ce(np.array([[10.0, -10.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-8)
    assert_allclose(grad, [[0.0, 0.0]], atol=1e-8)

def test_symmetric_cross_entropy():
    loss, grad = softmax_ce(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(np.log(2.0))
    assert_allclose(grad, [[-0.5, 0.5]])

def test_masked_cross_entropy_equals_two_class():
    masked, _ = softmax_ce(np.array([[1.0, 2.0, 3.0, 4.0]]), np.array([3]), np.array([False, False, True, True]))
    two_class, _ = softmax_ce(np.array([[3.0, 4.0]]), np.array([1]))
    assert masked == pytest.approx(two_class)

def test_first_adam_step_moves_by_learning_rate():
    params = np.array([1.0])
    adam_step(params, np.array([1.0]), AdamState.fresh(1), 0.1)
    assert params[0] == pytest.approx(0.9, abs=1e-7)

def test_zero_gradient_steps_leave_params():
    params = np.array([0.3, -0.2])
    state = AdamState.fresh(2)
    for _ in range(2):
        adam_step(params, np.zeros(2), state, 0.1)
    assert_array_equal(params, [0.3, -0.2])
