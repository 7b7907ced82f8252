import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from trire_utils.continual_system.core.ema import EMAModel, consistency_loss, predict
from trire_utils.continual_system.core.exceptions import InputError, ShapeError
from trire_utils.continual_system.core.model import MLPNet, backward, forward
from trire_utils.continual_system.core.numeric import gradient_check, make_rng

def working_net(seed=0):
    return MLPNet(3, [4], 5, make_rng(seed))

class TestEMAUpdate:
    def test_starts_as_exact_copy(self):
        net = working_net()
        ema = EMAModel.from_net(net, 0.9, 0.5)
        assert_array_equal(ema.params, net.flat)
        net.flat[:] = 0.0
        assert not np.array_equal(ema.params, net.flat)

    def test_closed_form_when_always_updating(self):
        net = working_net()
        ema = EMAModel.from_net(net, 0.95, 1.0)
        theta0 = ema.params.copy()
        constant = np.full_like(theta0, 0.3)
        rng = make_rng(0)
        for _ in range(100):
            assert ema.maybe_update(constant, rng)
        expected = 0.95 ** 100 * theta0 + (1 - 0.95 ** 100) * constant
        assert_allclose(ema.params, expected, rtol=0, atol=1e-12)

    def test_zero_rate_never_moves(self):
        ema = EMAModel.from_net(working_net(), 0.9, 0.0)
        before = ema.params.copy()
        rng = make_rng(1)
        for _ in range(50):
            assert not ema.maybe_update(np.zeros_like(before), rng)
        assert_array_equal(ema.params, before)
        assert ema.calls == 50 and ema.updates == 0

    def test_one_draw_per_call(self):
        ema = EMAModel.from_net(working_net(), 0.9, 0.3)
        rng, mirror = make_rng(5), make_rng(5)
        moves = [ema.maybe_update(np.zeros_like(ema.params), rng) for _ in range(200)]
        expected = [mirror.random() < 0.3 for _ in range(200)]
        assert moves == expected
        assert ema.updates == sum(expected)

    def test_invalid_settings(self):
        with pytest.raises(InputError):
            EMAModel.from_net(working_net(), 1.0, 0.5)
        with pytest.raises(InputError):
            EMAModel.from_net(working_net(), 0.9, 1.5)
        ema = EMAModel.from_net(working_net(), 0.9, 0.5)
        with pytest.raises(ShapeError):
            ema.maybe_update(np.zeros(3), make_rng(0))

class TestConsistency:
    def test_zero_when_models_agree(self):
        net = working_net()
        ema = EMAModel.from_net(net, 0.9, 0.5)
        result = consistency_loss(net, ema, make_rng(1).random((4, 3)))
        assert result.loss == 0.0
        assert np.all(result.grad_logits == 0.0)

    def test_gradient_matches_finite_differences(self):
        net = working_net(2)
        ema = EMAModel(working_net(3), 0.9, 0.5)
        x = make_rng(4).random((6, 3))

        def loss_and_grad(values):
            net.set_params(values)
            result = consistency_loss(net, ema, x)
            return result.loss, backward(net, result.trace, result.grad_logits)

        report = gradient_check(loss_and_grad, net.flat.copy(), net.layout.block_slices())
        assert report.passed, report.errors

    def test_empty_batch(self):
        net = working_net()
        assert consistency_loss(net, EMAModel.from_net(net, 0.9, 0.5), np.zeros((0, 3))) is None

class TestPredict:
    def test_task_mask_restricts_argmax(self):
        net = working_net()
        ema = EMAModel.from_net(net, 0.9, 0.5)
        x = make_rng(2).random((5, 3))
        mask = np.array([False, False, True, True, False])
        logits = predict(ema, x, mask)
        assert np.all(np.isneginf(logits[:, ~mask]))
        assert set(np.argmax(logits, axis=1)) <= {2, 3}
        assert_array_equal(predict(ema, x), forward(ema.net, x)[0])

    def test_mask_length_checked(self):
        ema = EMAModel.from_net(working_net(), 0.9, 0.5)
        with pytest.raises(ShapeError):
            predict(ema, np.ones((1, 3)), np.ones(2, dtype=bool))

def test_single_update_arithmetic():
    net = MLPNet(1, [1], 1)
    net.flat[:] = 1.0
    ema = EMAModel.from_net(net, 0.9, 1.0)
    ema.maybe_update(np.zeros_like(net.flat), make_rng(0))
    assert_allclose(ema.params, np.full_like(net.flat, 0.9))

def test_consistency_of_unit_logit_gap():
    # working logits exceed the mirror by [1, -1] on one sample through the head bias
    net = MLPNet(1, [1], 2)
    ema = EMAModel.from_net(net, 0.9, 0.5)
    net.flat[net.layout.head_bias_block.slice] = [1.0, -1.0]
    net.touch()
    result = consistency_loss(net, ema, np.zeros((1, 1)))
    assert result.loss == pytest.approx(2.0)
    assert_allclose(result.grad_logits, [[2.0, -2.0]])
