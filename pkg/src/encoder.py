"""Hierarchical quadruple transformer encoder.

Every stage carries four token streams: source-aware ``f_s``, target-aware ``f_t``,
target-aware source ``f_ts`` (queries from the target stream, keys/values from the source
stream) and source-aware target ``f_st`` (queries source, keys/values target). Tokens are
[N, C] tensors in row-major spatial order.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src import ops
from src.params import ParamStore
from src.utils.errors import ContractError, ShapeError


@dataclass(frozen=True)
class StageConfig:
    channels: int
    depth: int
    heads: int
    reduction: int
    stride: int

    @property
    def head_dim(self):
        return self.channels // self.heads


@dataclass(frozen=True)
class EncoderConfig:
    stages: Tuple[StageConfig, ...]
    in_channels: int = 3
    patch_size: int = 4
    mlp_ratio: int = 4
    shared_cross_weights: bool = True

    def __post_init__(self):
        for i, stage in enumerate(self.stages):
            if stage.channels % stage.heads:
                raise ContractError(f'stage {i + 1}: {stage.channels} channels not divisible by {stage.heads} heads')

    @property
    def channels(self):
        return [s.channels for s in self.stages]

    @property
    def size_multiple(self):
        """Input sides must be multiples of this for every stage to stay integral."""
        return self.patch_size * 2 ** (len(self.stages) - 1)

    @classmethod
    def build(cls, channels, depths, heads, reductions, patch_size=4, mlp_ratio=4, shared_cross_weights=True):
        if not len(channels) == len(depths) == len(heads) == len(reductions):
            raise ContractError('channels, depths, heads and reductions must list one value per stage')
        stages = tuple(
            StageConfig(c, d, h, r, patch_size if i == 0 else 2)
            for i, (c, d, h, r) in enumerate(zip(channels, depths, heads, reductions))
        )
        return cls(stages, patch_size=patch_size, mlp_ratio=mlp_ratio, shared_cross_weights=shared_cross_weights)


# desk-scale default and the micro config used by gradient checks on 8x8 images
Q0 = EncoderConfig.build([8, 16, 32, 64], [1, 1, 1, 1], [1, 1, 2, 4], [8, 4, 2, 1])
Q_MICRO = EncoderConfig.build([4, 8, 8, 8], [1, 1, 1, 1], [1, 1, 2, 2], [2, 2, 1, 1], patch_size=1)


@dataclass
class QuadFeatures:
    f_s: object
    f_t: object
    f_ts: object
    f_st: object
    h: int
    w: int

    def branches(self):
        return self.f_s, self.f_t, self.f_ts, self.f_st

    @property
    def cross_source(self):
        return self.f_ts is not self.f_s

    @property
    def cross_target(self):
        return self.f_st is not self.f_t

    def map(self, fn, h, w):
        """Apply `fn` to every distinct stream, keeping dropped cross branches aliased."""
        f_s, f_t = fn(self.f_s), fn(self.f_t)
        f_ts = fn(self.f_ts) if self.cross_source else f_s
        f_st = fn(self.f_st) if self.cross_target else f_t
        return QuadFeatures(f_s, f_t, f_ts, f_st, h, w)


class EncoderWeights(ParamStore):
    """Per-stage patch embedding/merging, per-block attention and Mix-FFN weights.

    One attention weight set per block serves all four branches unless the config asks for
    a separate set ('xattn') on the cross branches.
    """

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        c_prev = config.in_channels
        for i, stage in enumerate(config.stages, start=1):
            c = stage.channels
            kernel = stage.stride if i == 1 else 3
            self.add_conv(f'stage{i}.embed', rng, (c, c_prev, kernel, kernel))
            self.add_norm(f'stage{i}.embed.ln', c)
            for b in range(stage.depth):
                prefix = f'stage{i}.block{b}'
                self.add_norm(f'{prefix}.ln1', c)
                attention_sets = ['attn'] if config.shared_cross_weights else ['attn', 'xattn']
                for attn in attention_sets:
                    self._add_attention(f'{prefix}.{attn}', rng, c, stage.reduction)
                hidden = c * config.mlp_ratio
                self.add_linear(f'{prefix}.ffn.fc1', rng, c, hidden)
                self.add_conv(f'{prefix}.ffn.dw', rng, (hidden, 1, 3, 3))
                self.add_linear(f'{prefix}.ffn.fc2', rng, hidden, c)
            self.add_norm(f'stage{i}.norm', c)
            c_prev = c

    def _add_attention(self, prefix, rng, channels, reduction):
        for proj in ('q', 'k', 'v', 'proj'):
            self.add_linear(f'{prefix}.{proj}', rng, channels, channels)
        if reduction > 1:
            self.add_linear(f'{prefix}.sr', rng, reduction * reduction * channels, channels)
            self.add_norm(f'{prefix}.sr_ln', channels)


def _norm(x, weights, name):
    return ops.layer_norm(x, weights[f'{name}.g'], weights[f'{name}.b'])


def _linear(x, weights, name):
    return ops.linear(x, weights[f'{name}.w'], weights[f'{name}.b'])


def patch_embed(img, weights):
    """Non-overlapping patch projection of a [3, H, W] image to [(H/p)(W/p), C_1] tokens."""
    config = weights.config
    if img.ndim != 3 or img.shape[0] != config.in_channels:
        raise ShapeError(f'expected a [{config.in_channels}, H, W] image, got {img.shape}')
    _, height, width = img.shape
    if height % config.size_multiple or width % config.size_multiple:
        raise ShapeError(f'image {height}x{width} is not divisible by {config.size_multiple}')
    p = config.patch_size
    fmap = ops.conv2d(img, weights['stage1.embed.w'], weights['stage1.embed.b'], stride=p)
    tokens = _norm(ops.map_to_tokens(fmap), weights, 'stage1.embed.ln')
    return tokens, height // p, width // p


def sequence_reduce(x, reduction, h, w, weight, bias=None):
    """Fold non-overlapping R x R token windows into one token and project back to C channels."""
    n, c = x.shape
    if n != h * w:
        raise ShapeError(f'{n} tokens do not form a {h}x{w} grid')
    if h % reduction or w % reduction:
        raise ShapeError(f'{h}x{w} grid is not divisible by reduction ratio {reduction}')
    hr, wr = h // reduction, w // reduction
    folded = ops.reshape(x, (hr, reduction, wr, reduction, c))
    folded = ops.transpose(folded, (0, 2, 1, 3, 4))
    folded = ops.reshape(folded, (hr * wr, reduction * reduction * c))
    return ops.linear(folded, weight, bias)


def attention(x_query, x_kv, weights, prefix, heads, reduction, kv_hw):
    """Multi-head scaled dot-product attention with sequence-reduced keys and values.

    Returns the output projection only; callers add the residual.
    """
    n_q, c = x_query.shape
    if x_kv.ndim != 2 or x_kv.shape[1] != c:
        raise ShapeError(f'attention channel mismatch: queries {x_query.shape}, keys/values {x_kv.shape}')
    if c % heads:
        raise ShapeError(f'{c} channels not divisible by {heads} heads')
    d = c // heads

    kv = x_kv
    if reduction > 1:
        kv = sequence_reduce(kv, reduction, kv_hw[0], kv_hw[1], weights[f'{prefix}.sr.w'], weights[f'{prefix}.sr.b'])
        kv = _norm(kv, weights, f'{prefix}.sr_ln')
    n_kv = kv.shape[0]

    q = ops.transpose(ops.reshape(_linear(x_query, weights, f'{prefix}.q'), (n_q, heads, d)), (1, 0, 2))
    k = ops.transpose(ops.reshape(_linear(kv, weights, f'{prefix}.k'), (n_kv, heads, d)), (1, 2, 0))
    v = ops.transpose(ops.reshape(_linear(kv, weights, f'{prefix}.v'), (n_kv, heads, d)), (1, 0, 2))

    scores = ops.matmul(q, k) * (1.0 / np.sqrt(d))
    out = ops.matmul(ops.softmax_lastdim(scores), v)
    out = ops.reshape(ops.transpose(out, (1, 0, 2)), (n_q, c))
    return _linear(out, weights, f'{prefix}.proj')


def emsa(x, weights, prefix, heads, reduction, hw):
    return attention(x, x, weights, prefix, heads, reduction, hw)


def emca(x_query, x_kv, weights, prefix, heads, reduction, kv_hw):
    return attention(x_query, x_kv, weights, prefix, heads, reduction, kv_hw)


def mix_ffn(x, h, w, weights, prefix):
    """fc1 -> depthwise 3x3 conv on the h x w grid -> GELU -> fc2; no residual."""
    if x.shape[0] != h * w:
        raise ShapeError(f'mix_ffn got {x.shape[0]} tokens for a {h}x{w} grid')
    hidden = _linear(x, weights, f'{prefix}.fc1')
    fmap = ops.tokens_to_map(hidden, h, w)
    fmap = ops.conv2d(fmap, weights[f'{prefix}.dw.w'], weights[f'{prefix}.dw.b'], padding=1, groups=hidden.shape[1])
    return _linear(ops.map_to_tokens(ops.gelu(fmap)), weights, f'{prefix}.fc2')


def _ffn_residual(f_hat, h, w, weights, prefix):
    return mix_ffn(f_hat, h, w, weights, f'{prefix}.ffn') + f_hat


def quad_block(q, weights, stage, block):
    """One quadruple transformer block over all four streams."""
    shapes = {f.shape for f in q.branches()}
    if len(shapes) != 1:
        raise ShapeError(f'quad block streams differ in shape: {sorted(shapes)}')
    prefix = f'stage{stage}.block{block}'
    cfg = weights.config.stages[stage - 1]
    hw = (q.h, q.w)
    cross = 'attn' if weights.config.shared_cross_weights else 'xattn'

    a_s = _norm(q.f_s, weights, f'{prefix}.ln1')
    a_t = _norm(q.f_t, weights, f'{prefix}.ln1')

    def attend(a_q, a_kv, base, attn):
        return attention(a_q, a_kv, weights, f'{prefix}.{attn}', cfg.heads, cfg.reduction, hw) + base

    s_hat = attend(a_s, a_s, q.f_s, 'attn')
    t_hat = attend(a_t, a_t, q.f_t, 'attn')
    ts_hat = attend(a_t, a_s, q.f_ts, cross) if q.cross_source else s_hat
    st_hat = attend(a_s, a_t, q.f_st, cross) if q.cross_target else t_hat

    ffn = lambda f: _ffn_residual(f, q.h, q.w, weights, prefix)
    return QuadFeatures(s_hat, t_hat, ts_hat, st_hat, q.h, q.w).map(ffn, q.h, q.w)


def patch_merge(x, h, w, weights, stage):
    """Overlapping 3x3 stride-2 merge from stage-1 to stage resolution, then LayerNorm."""
    if h % 2 or w % 2:
        raise ShapeError(f'patch merging needs even grid sides, got {h}x{w}')
    fmap = ops.tokens_to_map(x, h, w)
    fmap = ops.conv2d(fmap, weights[f'stage{stage}.embed.w'], weights[f'stage{stage}.embed.b'], stride=2, padding=1)
    tokens = _norm(ops.map_to_tokens(fmap), weights, f'stage{stage}.embed.ln')
    return tokens, h // 2, w // 2


def encoder_forward(img_s, img_t, weights, cross_source=True, cross_target=True):
    """Run both images through all stages; returns one QuadFeatures per stage.

    The stage-1 cross streams start from the embedded query-side tokens: f_ts from the target
    tokens and f_st from the source tokens. A disabled cross stream aliases its self stream.
    """
    if img_s.shape != img_t.shape:
        raise ShapeError(f'source and target images differ in size: {img_s.shape} vs {img_t.shape}')
    x_s, h, w = patch_embed(img_s, weights)
    x_t, _, _ = patch_embed(img_t, weights)
    q = QuadFeatures(x_s, x_t, x_t if cross_source else x_s, x_s if cross_target else x_t, h, w)

    outputs = []
    for i, stage in enumerate(weights.config.stages, start=1):
        if i > 1:
            nh, nw = q.h // 2, q.w // 2
            q = q.map(lambda f: patch_merge(f, q.h, q.w, weights, i)[0], nh, nw)
        for b in range(stage.depth):
            q = quad_block(q, weights, i, b)
        q = q.map(lambda f: _norm(f, weights, f'stage{i}.norm'), q.h, q.w)
        outputs.append(q)
    return outputs


def encode_self(img, weights):
    """Self-attention-only path for a single image; returns [(tokens, h, w)] per stage.

    Performs exactly the operations of the f_t stream of `encoder_forward`.
    """
    f, h, w = patch_embed(img, weights)
    outputs = []
    for i, stage in enumerate(weights.config.stages, start=1):
        if i > 1:
            f, h, w = patch_merge(f, h, w, weights, i)
        for b in range(stage.depth):
            prefix = f'stage{i}.block{b}'
            a = _norm(f, weights, f'{prefix}.ln1')
            f_hat = attention(a, a, weights, f'{prefix}.attn', stage.heads, stage.reduction, (h, w)) + f
            f = _ffn_residual(f_hat, h, w, weights, prefix)
        f = _norm(f, weights, f'stage{i}.norm')
        outputs.append((f, h, w))
    return outputs
