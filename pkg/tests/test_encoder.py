import numpy as np
import pytest
from scipy.special import erf

from src import ops
from src.autograd import Tensor, no_tape
from src.encoder import (
    Q_MICRO, EncoderConfig, EncoderWeights, QuadFeatures, emca, emsa, encode_self, encoder_forward, mix_ffn,
    patch_embed, patch_merge, quad_block, sequence_reduce,
)
from src.gradcheck import finite_diff_check
from src.utils.errors import ContractError, ShapeError
from src.verify import suite_cross_degeneracy, suite_shape_chain


ATTN = 'stage1.block0.attn'
FFN = 'stage1.block0.ffn'


def stage_weights(channels=(4,), heads=(1,), reductions=(1,), patch_size=1, seed=0):
    config = EncoderConfig.build(list(channels), [1] * len(channels), list(heads), list(reductions),
                                 patch_size=patch_size)
    return EncoderWeights(config, np.random.default_rng(seed))


def randomize(weights, rng, prefix, scale=0.5):
    for name, tensor in weights.named_parameters():
        if name.startswith(prefix):
            tensor.data[...] = scale * rng.normal(size=tensor.shape)


def dense_attention(x_query, x_kv, weights, prefix):
    """Single-head attention written out query by query."""
    def project(x, name):
        return x @ weights[f'{prefix}.{name}.w'].data + weights[f'{prefix}.{name}.b'].data

    q, k, v = project(x_query, 'q'), project(x_kv, 'k'), project(x_kv, 'v')
    rows = []
    for qi in q:
        scores = [float(qi @ kj) / np.sqrt(q.shape[1]) for kj in k]
        top = max(scores)
        e = [np.exp(s - top) for s in scores]
        rows.append(sum(ej / sum(e) * vj for ej, vj in zip(e, v)))
    return project(np.array(rows), 'proj')


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def test_desk_scale_shape_chain(rng):
    ok, detail = suite_shape_chain(rng)
    assert ok, detail


def test_identical_images_collapse_cross_branches(rng):
    ok, detail = suite_cross_degeneracy(rng)
    assert ok, detail


def test_micro_stage_shapes(model, rng):
    with no_tape():
        stages = encoder_forward(Tensor(rng.random((3, 8, 8))), Tensor(rng.random((3, 8, 8))), model.encoder)
    assert [(q.h, q.w) for q in stages] == [(8, 8), (4, 4), (2, 2), (1, 1)]
    assert [q.f_st.shape for q in stages] == [(64, 4), (16, 8), (4, 8), (1, 8)]


def test_self_path_matches_target_stream(model, rng):
    img_s, img_t = Tensor(rng.random((3, 8, 8))), Tensor(rng.random((3, 8, 8)))
    with no_tape():
        stages = encoder_forward(img_s, img_t, model.encoder)
        single = encode_self(img_t, model.encoder)
    for q, (tokens, h, w) in zip(stages, single):
        assert (q.h, q.w) == (h, w)
        np.testing.assert_array_equal(q.f_t.data, tokens.data)


def test_cross_branches_differ_for_different_images(model, rng):
    with no_tape():
        stages = encoder_forward(Tensor(rng.random((3, 8, 8))), Tensor(rng.random((3, 8, 8))), model.encoder)
    assert not np.allclose(stages[-1].f_ts.data, stages[-1].f_s.data)


@pytest.mark.parametrize('cross_source,cross_target', [(False, False), (True, False), (False, True)])
def test_disabled_cross_streams_alias_self_streams(model, rng, cross_source, cross_target):
    img = Tensor(rng.random((3, 8, 8)))
    with no_tape():
        stages = encoder_forward(img, Tensor(rng.random((3, 8, 8))), model.encoder, cross_source, cross_target)
    for q in stages:
        assert (q.f_ts is q.f_s) != cross_source
        assert (q.f_st is q.f_t) != cross_target


def test_separate_cross_weights_add_parameters(rng):
    shared = EncoderWeights(Q_MICRO, np.random.default_rng(0))
    config = EncoderConfig.build([4, 8, 8, 8], [1, 1, 1, 1], [1, 1, 2, 2], [2, 2, 1, 1], patch_size=1,
                                 shared_cross_weights=False)
    separate = EncoderWeights(config, np.random.default_rng(0))
    assert separate.count() > shared.count()
    assert 'stage1.block0.xattn.q.w' in separate
    assert 'stage1.block0.xattn.q.w' not in shared


def test_heads_must_divide_channels():
    with pytest.raises(ContractError):
        EncoderConfig.build([6], [1], [4], [1])


def test_image_size_must_be_a_multiple(model):
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((3, 6, 6))), Tensor(np.zeros((3, 6, 6))))


def test_mismatched_pair_sizes(model):
    with pytest.raises(ShapeError):
        encoder_forward(Tensor(np.zeros((3, 8, 8))), Tensor(np.zeros((3, 16, 16))), model.encoder)


def test_sequence_reduce_needs_divisible_grid():
    with pytest.raises(ShapeError):
        sequence_reduce(Tensor(np.zeros((9, 2))), 2, 3, 3, Tensor(np.zeros((8, 2))))


def test_patch_embed_zero_image_gives_zero_tokens():
    weights = stage_weights(patch_size=2)
    with no_tape():
        tokens, h, w = patch_embed(Tensor(np.zeros((3, 4, 4))), weights)
    assert (h, w) == (2, 2)
    np.testing.assert_array_equal(tokens.data, np.zeros((4, 4)))


def test_patch_embed_single_pixel_touches_one_token():
    weights = stage_weights(patch_size=2)
    img = np.zeros((3, 4, 4))
    with no_tape():
        base, _, _ = patch_embed(Tensor(img), weights)
        img[1, 1, 3] = 1.0
        poked, _, _ = patch_embed(Tensor(img), weights)
    changed = np.flatnonzero(np.abs(poked.data - base.data).max(axis=1) > 0)
    assert changed.tolist() == [1]


def test_sequence_reduce_identity_projection():
    x = np.random.default_rng(2).normal(size=(16, 3))
    out = sequence_reduce(Tensor(x), 1, 4, 4, Tensor(np.eye(3)))
    np.testing.assert_array_equal(out.data, x)


def test_sequence_reduce_keeps_constant_field():
    v = np.array([0.3, -1.2, 2.5])
    averaging = np.tile(np.eye(3), (4, 1)) / 4
    out = sequence_reduce(Tensor(np.tile(v, (16, 1))), 2, 4, 4, Tensor(averaging))
    assert out.shape == (4, 3)
    np.testing.assert_allclose(out.data, np.tile(v, (4, 1)), rtol=0, atol=1e-12)


def test_emsa_matches_dense_attention(rng):
    weights = stage_weights()
    randomize(weights, rng, ATTN)
    x = rng.normal(size=(3, 4))
    out = emsa(Tensor(x), weights, ATTN, heads=1, reduction=1, hw=(1, 3))
    np.testing.assert_allclose(out.data, dense_attention(x, x, weights, ATTN), rtol=0, atol=1e-12)


def test_emsa_single_token_returns_projected_value(rng):
    weights = stage_weights()
    randomize(weights, rng, ATTN)
    x = rng.normal(size=(1, 4))
    out = emsa(Tensor(x), weights, ATTN, heads=1, reduction=1, hw=(1, 1))
    value = x @ weights[f'{ATTN}.v.w'].data + weights[f'{ATTN}.v.b'].data
    expected = value @ weights[f'{ATTN}.proj.w'].data + weights[f'{ATTN}.proj.b'].data
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


def test_emsa_with_zero_values_is_zero(rng):
    weights = stage_weights()
    randomize(weights, rng, ATTN)
    for name in ('v.w', 'v.b', 'proj.b'):
        weights[f'{ATTN}.{name}'].data[...] = 0.0
    out = emsa(Tensor(rng.normal(size=(4, 4))), weights, ATTN, heads=1, reduction=1, hw=(2, 2))
    np.testing.assert_array_equal(out.data, np.zeros((4, 4)))


def test_emsa_is_permutation_equivariant_without_reduction(rng):
    weights = stage_weights(channels=(8,), heads=(2,))
    randomize(weights, rng, ATTN)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    out = emsa(Tensor(x), weights, ATTN, heads=2, reduction=1, hw=(2, 3))
    permuted = emsa(Tensor(x[perm]), weights, ATTN, heads=2, reduction=1, hw=(2, 3))
    np.testing.assert_allclose(permuted.data, out.data[perm], rtol=0, atol=1e-12)


def test_emca_on_its_own_queries_is_emsa(rng):
    weights = stage_weights(reductions=(2,))
    randomize(weights, rng, ATTN)
    x = Tensor(rng.normal(size=(16, 4)))
    np.testing.assert_array_equal(emca(x, x, weights, ATTN, 1, 2, (4, 4)).data,
                                  emsa(x, weights, ATTN, 1, 2, (4, 4)).data)


def test_emca_matches_dense_cross_attention(rng):
    weights = stage_weights()
    randomize(weights, rng, ATTN)
    x_query, x_kv = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out = emca(Tensor(x_query), Tensor(x_kv), weights, ATTN, heads=1, reduction=1, kv_hw=(1, 3))
    np.testing.assert_allclose(out.data, dense_attention(x_query, x_kv, weights, ATTN), rtol=0, atol=1e-12)


def test_emca_single_key_gives_identical_rows(rng):
    weights = stage_weights()
    randomize(weights, rng, ATTN)
    out = emca(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(1, 4))), weights, ATTN, 1, 1, (1, 1))
    np.testing.assert_allclose(out.data, np.tile(out.data[0], (5, 1)), rtol=0, atol=1e-12)


def test_emca_channel_mismatch(rng):
    weights = stage_weights()
    with pytest.raises(ShapeError):
        emca(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))), weights, ATTN, 1, 1, (1, 3))


def test_mix_ffn_hidden_width():
    weights = stage_weights(channels=(8,))
    assert weights[f'{FFN}.fc1.w'].shape == (8, 32)
    assert weights[f'{FFN}.dw.w'].shape == (32, 1, 3, 3)


def test_mix_ffn_zero_input_gives_zero_output():
    weights = stage_weights()
    np.testing.assert_array_equal(mix_ffn(Tensor(np.zeros((16, 4))), 4, 4, weights, FFN).data, np.zeros((16, 4)))


def test_mix_ffn_with_identity_kernel_is_a_plain_mlp(rng):
    weights = stage_weights()
    randomize(weights, rng, FFN)
    kernel = weights[f'{FFN}.dw.w'].data
    kernel[...] = 0.0
    kernel[:, :, 1, 1] = 1.0
    weights[f'{FFN}.dw.b'].data[...] = 0.0
    x = rng.normal(size=(16, 4))

    hidden = x @ weights[f'{FFN}.fc1.w'].data + weights[f'{FFN}.fc1.b'].data
    expected = gelu(hidden) @ weights[f'{FFN}.fc2.w'].data + weights[f'{FFN}.fc2.b'].data
    np.testing.assert_allclose(mix_ffn(Tensor(x), 4, 4, weights, FFN).data, expected, rtol=0, atol=1e-12)


def test_mix_ffn_mixes_the_3x3_neighbourhood(rng):
    weights = stage_weights()
    randomize(weights, rng, FFN)
    x = rng.normal(size=(16, 4))
    base = mix_ffn(Tensor(x), 4, 4, weights, FFN).data
    x[5] += 1.0  # grid position (1, 1)
    poked = mix_ffn(Tensor(x), 4, 4, weights, FFN).data

    changed = (np.abs(poked - base).max(axis=1) > 0).reshape(4, 4)
    expected = np.zeros((4, 4), dtype=bool)
    expected[:3, :3] = True
    np.testing.assert_array_equal(changed, expected)


def test_mix_ffn_grid_mismatch():
    with pytest.raises(ShapeError):
        mix_ffn(Tensor(np.zeros((15, 4))), 4, 4, stage_weights(), FFN)


def test_quad_block_without_attention_output_is_the_ffn_residual(rng):
    weights = stage_weights(reductions=(2,))
    randomize(weights, rng, 'stage1.block0')
    weights[f'{ATTN}.proj.w'].data[...] = 0.0
    weights[f'{ATTN}.proj.b'].data[...] = 0.0
    streams = [Tensor(rng.normal(size=(16, 4))) for _ in range(4)]

    out = quad_block(QuadFeatures(*streams, 4, 4), weights, 1, 0)
    for f, result in zip(streams, out.branches()):
        expected = mix_ffn(f, 4, 4, weights, FFN) + f
        np.testing.assert_array_equal(result.data, expected.data)


def test_quad_block_equal_streams_give_equal_outputs(rng):
    weights = stage_weights(reductions=(2,))
    randomize(weights, rng, 'stage1.block0')
    x = rng.normal(size=(16, 4))
    streams = [Tensor(x.copy()) for _ in range(4)]
    out = quad_block(QuadFeatures(*streams, 4, 4), weights, 1, 0)
    assert out.cross_source and out.cross_target
    for f in (out.f_t, out.f_ts, out.f_st):
        np.testing.assert_array_equal(f.data, out.f_s.data)


@pytest.mark.parametrize('stream', range(4))
def test_quad_block_input_gradients(rng, stream):
    weights = stage_weights(channels=(4,), heads=(2,), reductions=(2,))
    randomize(weights, rng, 'stage1.block0', scale=0.3)
    streams = [Tensor(rng.normal(size=(16, 4))) for _ in range(4)]
    streams[stream] = Tensor(streams[stream].data, requires_grad=True)

    def total(x):
        inputs = list(streams)
        inputs[stream] = x
        out = quad_block(QuadFeatures(*inputs, 4, 4), weights, 1, 0)
        return ops.sum(ops.concat([ops.sum(f, axis=0) for f in out.branches()], axis=0))

    assert finite_diff_check(total, streams[stream]) < 1e-4


def test_quad_block_streams_must_match():
    weights = stage_weights()
    a, b = Tensor(np.zeros((16, 4))), Tensor(np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        quad_block(QuadFeatures(a, a, b, a, 4, 4), weights, 1, 0)


def test_patch_merge_halves_the_grid():
    weights = stage_weights(channels=(4, 6), heads=(1, 1), reductions=(1, 1))
    with no_tape():
        tokens, h, w = patch_merge(Tensor(np.ones((64, 4))), 8, 8, weights, 2)
    assert tokens.shape == (16, 6) and (h, w) == (4, 4)


def test_patch_merge_zero_weights_give_zero_output(rng):
    weights = stage_weights(channels=(4, 6), heads=(1, 1), reductions=(1, 1))
    weights['stage2.embed.w'].data[...] = 0.0
    tokens, _, _ = patch_merge(Tensor(rng.normal(size=(16, 4))), 4, 4, weights, 2)
    np.testing.assert_array_equal(tokens.data, np.zeros((4, 6)))


def test_patch_merge_keeps_constant_field(rng):
    weights = stage_weights(channels=(4, 6), heads=(1, 1), reductions=(1, 1))
    kernel = weights['stage2.embed.w'].data
    kernel[...] = 0.0
    kernel[:, :, 1, 1] = rng.normal(size=(6, 4))
    v = rng.normal(size=4)
    tokens, _, _ = patch_merge(Tensor(np.tile(v, (16, 1))), 4, 4, weights, 2)
    np.testing.assert_allclose(tokens.data, np.tile(tokens.data[0], (4, 1)), rtol=0, atol=1e-12)
    assert np.abs(tokens.data[0]).max() > 0


def test_patch_merge_needs_even_grid():
    weights = stage_weights(channels=(4, 6), heads=(1, 1), reductions=(1, 1))
    with pytest.raises(ShapeError):
        patch_merge(Tensor(np.zeros((9, 4))), 3, 3, weights, 2)
