"""Segmentation, adversarial and total losses, and the output-space discriminator."""
import logging

import numpy as np

from src import ops
from src.autograd import Tensor
from src.params import ParamStore
from src.utils.errors import ShapeError


logger = logging.getLogger('pladapt.objectives')

BETA1 = 0.1
BETA2 = 1.0


def seg_cross_entropy(mask, labels, valid=None, class_weights=None):
    """Pixel cross-entropy of a SegMask against a class map, averaged over valid pixels.

    Returns ``(loss, empty)``; with no valid pixel the loss is a zero constant and `empty` is True.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f'labels must be a [H, W] class map, got {labels.shape}')
    valid = np.ones(labels.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if valid.shape != labels.shape:
        raise ShapeError(f'valid mask {valid.shape} does not match labels {labels.shape}')
    n_valid = int(valid.sum())
    if n_valid == 0:
        logger.warning('segmentation loss over zero valid pixels')
        return Tensor(0.0), True

    num_classes = mask.num_classes
    onehot = np.eye(num_classes)[labels.astype(int)]
    weights = valid.astype(np.float64)
    if class_weights is not None:
        weights = weights * np.asarray(class_weights, dtype=np.float64)[labels.astype(int)]
    coef = onehot * weights[..., None]

    log_probs = mask.log_probs(*labels.shape)
    return ops.neg(ops.sum(ops.mul(log_probs, coef))) * (1.0 / n_valid), False


class DiscriminatorWeights(ParamStore):
    def __init__(self, in_channels, channels, rng, leaky_slope=0.2):
        super().__init__()
        self.channels = tuple(channels)
        self.leaky_slope = leaky_slope
        c_prev = in_channels
        for i, c in enumerate(self.channels):
            self.add_conv(f'disc.conv{i}', rng, (c, c_prev, 4, 4))
            c_prev = c


def discriminator_forward(probs, weights):
    """Patch real/fake logits for a [K, H, W] probability map; 4x4 stride-2 convs."""
    x = probs
    last = len(weights.channels) - 1
    for i in range(len(weights.channels)):
        x = ops.conv2d(x, weights[f'disc.conv{i}.w'], weights[f'disc.conv{i}.b'], stride=2, padding=1)
        if i < last:
            x = ops.leaky_relu(x, weights.leaky_slope)
    return x


def discriminator_loss(probs_s, probs_t, weights):
    """-log D(M_s) - log(1 - D(M_t)) on detached masks, averaged over patches."""
    real = discriminator_forward(probs_s.detach(), weights)
    fake = discriminator_forward(probs_t.detach(), weights)
    return ops.mean(ops.softplus(ops.neg(real))) + ops.mean(ops.softplus(fake))


def generator_loss(probs_t, weights):
    """Non-saturating -log D(M_t)."""
    return ops.mean(ops.softplus(ops.neg(discriminator_forward(probs_t, weights))))


def adversarial_losses(probs_s, probs_t, weights):
    """(d_loss, g_loss) in log-sigmoid form."""
    return discriminator_loss(probs_s, probs_t, weights), generator_loss(probs_t, weights)


def total_loss(l_seg_s, l_seg_t, g_loss, beta1=BETA1, beta2=BETA2):
    return ops.add(ops.add(l_seg_s, ops.mul(l_seg_t, beta1)), ops.mul(g_loss, beta2))
