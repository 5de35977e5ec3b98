import numpy as np
import pytest

from src.autograd import Tensor, no_tape
from src.decoder import DecoderConfig, infer_target_sourcefree
from src.encoder import Q_MICRO
from src.model import QuadFormer
from src.utils.errors import ContractError


def test_mask_shapes(model, rng):
    with no_tape():
        mask_s, mask_t = model.forward(Tensor(rng.random((3, 8, 8))), Tensor(rng.random((3, 8, 8))))
    assert mask_s.logits.shape == mask_t.logits.shape == (2, 8, 8)
    # augmented representation: two phi maps of 4 stages x C_e channels
    assert mask_t.features.shape == (64, 2 * 4 * 8)


def test_probabilities_sum_to_one(model, rng):
    with no_tape():
        _, mask_t = model.forward(Tensor(rng.random((3, 8, 8))), Tensor(rng.random((3, 8, 8))))
    probs = mask_t.probabilities(16, 16)
    assert probs.shape == (2, 16, 16)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0)
    assert mask_t.labels(16, 16).dtype == np.uint8


def test_source_free_inference_is_the_target_head(model, rng):
    img = Tensor(rng.random((3, 8, 8)))
    with no_tape():
        free = infer_target_sourcefree(img, model.encoder, model.decoder)
        single = model.forward_single(img)
    np.testing.assert_array_equal(free.logits.data, single.logits.data)


def test_separate_heads_are_synced_after_warmup(rng):
    config = DecoderConfig(stage_channels=tuple(Q_MICRO.channels), embed_dim=8, shared=False)
    model = QuadFormer(Q_MICRO, config, seed=1)
    assert 'dec_s.fuse.w' in model.decoder and 'dec_t.fuse.w' in model.decoder
    img = Tensor(rng.random((3, 8, 8)))
    with no_tape():
        before = model.forward_single(img, domain='target').logits.data
        model.sync_heads()
        source = model.forward_single(img, domain='source').logits.data
        target = model.forward_single(img, domain='target').logits.data
    assert not np.array_equal(before, target)
    np.testing.assert_array_equal(source, target)


def test_extra_layer(rng):
    config = DecoderConfig(stage_channels=tuple(Q_MICRO.channels), embed_dim=8, extra_layer=True)
    model = QuadFormer(Q_MICRO, config, seed=1)
    assert 'dec.hidden.w' in model.decoder
    with no_tape():
        assert model.forward_single(Tensor(rng.random((3, 8, 8)))).logits.shape == (2, 8, 8)


def test_state_round_trip(model, rng):
    other = QuadFormer(model.encoder_config, model.decoder_config, seed=99)
    other.load_state(model.state())
    img = Tensor(rng.random((3, 8, 8)))
    with no_tape():
        np.testing.assert_array_equal(model.forward_single(img).logits.data, other.forward_single(img).logits.data)


def test_load_state_rejects_missing_parameters(model):
    state = model.state()
    state.pop('decoder/dec.cls.w')
    with pytest.raises(ContractError):
        model.load_state(state)


def test_needs_two_classes():
    with pytest.raises(ContractError):
        DecoderConfig(stage_channels=(4,), num_classes=1)
