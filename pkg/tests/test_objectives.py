import numpy as np
import pytest

from src import ops
from src.autograd import Tape, Tensor
from src.decoder import SegMask
from src.objectives import (
    DiscriminatorWeights, adversarial_losses, discriminator_forward, seg_cross_entropy, total_loss,
)
from src.optim import OptimState, learning_rate, optimizer_step
from src.utils.errors import ContractError, NonFiniteError, ShapeError


def test_total_loss_weighting():
    assert total_loss(Tensor(1.0), Tensor(0.5), Tensor(0.2)).item() == pytest.approx(1.25)
    assert total_loss(Tensor(1.0), Tensor(0.5), Tensor(0.2), beta1=0.0, beta2=0.0).item() == 1.0


def test_uniform_logits_give_log_two():
    mask = SegMask(logits=Tensor(np.zeros((2, 4, 4))))
    labels = np.zeros((4, 4), dtype=np.uint8)
    labels[1, :] = 1
    loss, empty = seg_cross_entropy(mask, labels)
    assert not empty
    assert loss.item() == pytest.approx(np.log(2.0))


def test_class_weights_scale_line_pixels():
    mask = SegMask(logits=Tensor(np.zeros((2, 2, 2))))
    labels = np.array([[0, 1], [0, 0]])
    loss, _ = seg_cross_entropy(mask, labels, class_weights=(1.0, 10.0))
    assert loss.item() == pytest.approx(13.0 * np.log(2.0) / 4)


def test_invalid_pixels_are_ignored():
    logits = np.zeros((2, 2, 2))
    logits[1, 0, 0] = 50.0
    mask = SegMask(logits=Tensor(logits))
    valid = np.array([[False, True], [True, True]])
    loss, _ = seg_cross_entropy(mask, np.zeros((2, 2)), valid)
    assert loss.item() == pytest.approx(np.log(2.0))


def test_no_valid_pixels():
    mask = SegMask(logits=Tensor(np.zeros((2, 2, 2))))
    loss, empty = seg_cross_entropy(mask, np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))
    assert empty
    assert loss.item() == 0.0


def test_label_shape_is_checked():
    mask = SegMask(logits=Tensor(np.zeros((2, 2, 2))))
    with pytest.raises(ShapeError):
        seg_cross_entropy(mask, np.zeros((2, 2)), np.ones((3, 3), dtype=bool))


def test_discriminator_patch_grid(rng):
    disc = DiscriminatorWeights(2, (4, 8, 1), rng)
    out = discriminator_forward(Tensor(rng.random((2, 32, 32))), disc)
    assert out.shape == (1, 4, 4)


def test_zero_discriminator_losses(rng):
    disc = DiscriminatorWeights(2, (4, 4, 1), rng)
    for _, tensor in disc.named_parameters():
        tensor.data[...] = 0.0
    probs = Tensor(rng.random((2, 16, 16)))
    d_loss, g_loss = adversarial_losses(probs, probs, disc)
    assert d_loss.item() == pytest.approx(2 * np.log(2.0))
    assert g_loss.item() == pytest.approx(np.log(2.0))


def test_discriminator_loss_does_not_reach_the_segmenter(rng):
    disc = DiscriminatorWeights(2, (4, 4, 1), rng)
    logits = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
    with Tape() as tape:
        probs = SegMask(logits=logits).probs(8, 8)
        d_loss, g_loss = adversarial_losses(probs, probs, disc)
    assert logits not in tape.backward(d_loss)
    with Tape() as tape:
        probs = SegMask(logits=logits).probs(8, 8)
        _, g_loss = adversarial_losses(probs, probs, disc)
    assert np.abs(tape.backward(g_loss)[logits]).sum() > 0


def test_learning_rate_schedule():
    state = OptimState(lr=1e-3, warmup_steps=10, total_steps=100)
    assert learning_rate(state, 0) == pytest.approx(1e-4)
    assert learning_rate(state, 10) == pytest.approx(1e-3)
    assert learning_rate(state, 55) == pytest.approx(5e-4)
    assert learning_rate(state, 100) == 0.0


def test_bad_schedule():
    with pytest.raises(ContractError):
        OptimState(lr=1e-3, warmup_steps=20, total_steps=10)


def test_adamw_descends_a_quadratic():
    p = Tensor([2.0, -3.0], requires_grad=True)
    state = OptimState(lr=0.1, weight_decay=0.0, warmup_steps=0, total_steps=1000)
    start = float(np.sum(p.data ** 2))
    for _ in range(50):
        with Tape() as tape:
            loss = ops.sum(ops.mul(p, p))
        grads = tape.backward(loss)
        optimizer_step([('p', p)], {'p': grads[p]}, state)
    assert state.step == 50
    assert np.sum(p.data ** 2) < 0.1 * start


def test_non_finite_gradient_is_refused():
    p = Tensor([1.0], requires_grad=True)
    state = OptimState(lr=0.1)
    with pytest.raises(NonFiniteError):
        optimizer_step([('p', p)], {'p': np.array([np.nan])}, state)
    assert state.step == 0
    assert p.data[0] == 1.0


def test_optimizer_state_round_trip():
    p = Tensor([1.0, 2.0], requires_grad=True)
    state = OptimState(lr=0.1)
    optimizer_step([('p', p)], {'p': np.array([0.5, -0.5])}, state)
    restored = OptimState(lr=0.1)
    restored.load_state(state.state('opt'), 'opt')
    assert restored.step == 1
    np.testing.assert_array_equal(restored.m['p'], state.m['p'])
    np.testing.assert_array_equal(restored.v['p'], state.v['p'])
