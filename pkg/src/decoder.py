"""All-MLP cross-domain decoder.

Per-stage features are unified to C_e channels, upsampled to the stage-1 grid and
concatenated into phi (4*C_e channels). A head fuses an augmented pair [phi_a, phi_b]
(8*C_e channels) and classifies every token.
"""
from dataclasses import dataclass

import numpy as np

from src import ops
from src.autograd import no_tape
from src.encoder import encode_self
from src.params import ParamStore
from src.utils.errors import ContractError, ShapeError


@dataclass(frozen=True)
class DecoderConfig:
    stage_channels: tuple
    embed_dim: int = 64
    num_classes: int = 2
    shared: bool = True
    extra_layer: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError(f'num_classes must be at least 2, got {self.num_classes}')

    @property
    def heads(self):
        return ('dec', 'dec') if self.shared else ('dec_s', 'dec_t')


@dataclass
class SegMask:
    logits: object
    features: object = None

    @property
    def num_classes(self):
        return self.logits.shape[0]

    def upsampled(self, height, width):
        """Full-resolution logits [K, H, W]."""
        return ops.upsample_bilinear(self.logits, height, width)

    def log_probs(self, height, width):
        logits = ops.transpose(self.upsampled(height, width), (1, 2, 0))
        return ops.log_softmax_lastdim(logits)

    def probs(self, height, width):
        """Softmax over classes at full resolution, as a [K, H, W] tensor."""
        logits = ops.transpose(self.upsampled(height, width), (1, 2, 0))
        return ops.transpose(ops.softmax_lastdim(logits), (2, 0, 1))

    def probabilities(self, height=None, width=None):
        """Detached numpy class probabilities, full resolution when a size is given."""
        with no_tape():
            if height is None:
                height, width = self.logits.shape[1:]
            return self.probs(height, width).data

    def labels(self, height=None, width=None):
        return np.argmax(self.probabilities(height, width), axis=0).astype(np.uint8)


class DecoderWeights(ParamStore):
    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        c_e = config.embed_dim
        for head in sorted(set(config.heads)):
            for i, channels in enumerate(config.stage_channels, start=1):
                self.add_linear(f'{head}.unify{i}', rng, channels, c_e)
            self.add_linear(f'{head}.fuse', rng, 2 * len(config.stage_channels) * c_e, c_e)
            if config.extra_layer:
                self.add_linear(f'{head}.hidden', rng, c_e, c_e)
            self.add_linear(f'{head}.cls', rng, c_e, config.num_classes)


def unify_and_upsample(stage_feats, weights, head):
    """[(tokens_i, h_i, w_i)] for every stage -> phi [(h_1*w_1), 4*C_e]."""
    n_stages = len(weights.config.stage_channels)
    if len(stage_feats) != n_stages:
        raise ShapeError(f'decoder expects {n_stages} stages, got {len(stage_feats)}')
    _, h1, w1 = stage_feats[0]
    maps = []
    for i, (tokens, h, w) in enumerate(stage_feats, start=1):
        unified = ops.linear(tokens, weights[f'{head}.unify{i}.w'], weights[f'{head}.unify{i}.b'])
        maps.append(ops.upsample_bilinear(ops.tokens_to_map(unified, h, w), h1, w1))
    return ops.map_to_tokens(ops.concat(maps, axis=0))


def fuse_and_predict(phi_a, phi_b, weights, head, h, w):
    """Fuse the augmented representation [phi_a, phi_b] and classify it into a SegMask."""
    if phi_a.shape != phi_b.shape:
        raise ShapeError(f'augmented pair shapes differ: {phi_a.shape} vs {phi_b.shape}')
    augmented = ops.concat([phi_a, phi_b], axis=1)
    fused = ops.gelu(ops.linear(augmented, weights[f'{head}.fuse.w'], weights[f'{head}.fuse.b']))
    if weights.config.extra_layer:
        fused = ops.gelu(ops.linear(fused, weights[f'{head}.hidden.w'], weights[f'{head}.hidden.b']))
    logits = ops.linear(fused, weights[f'{head}.cls.w'], weights[f'{head}.cls.b'])
    return SegMask(logits=ops.tokens_to_map(logits, h, w), features=augmented)


def _branch(stages, attr):
    return [(getattr(q, attr), q.h, q.w) for q in stages]


def decoder_forward(stages, weights):
    """Source mask from [phi_s, phi_ts], target mask from [phi_t, phi_st]."""
    head_s, head_t = weights.config.heads
    h, w = stages[0].h, stages[0].w

    phi_s = unify_and_upsample(_branch(stages, 'f_s'), weights, head_s)
    phi_ts = unify_and_upsample(_branch(stages, 'f_ts'), weights, head_s) if stages[0].cross_source else phi_s
    phi_t = unify_and_upsample(_branch(stages, 'f_t'), weights, head_t)
    phi_st = unify_and_upsample(_branch(stages, 'f_st'), weights, head_t) if stages[0].cross_target else phi_t

    mask_s = fuse_and_predict(phi_s, phi_ts, weights, head_s, h, w)
    mask_t = fuse_and_predict(phi_t, phi_st, weights, head_t, h, w)
    return mask_s, mask_t


def predict_single(img, encoder_weights, decoder_weights, head):
    stages = encode_self(img, encoder_weights)
    phi = unify_and_upsample(stages, decoder_weights, head)
    _, h, w = stages[0]
    return fuse_and_predict(phi, phi, decoder_weights, head, h, w)


def infer_target_sourcefree(img_t, encoder_weights, decoder_weights):
    """Target mask from [phi_t, phi_t]; needs no source image."""
    return predict_single(img_t, encoder_weights, decoder_weights, decoder_weights.config.heads[1])
