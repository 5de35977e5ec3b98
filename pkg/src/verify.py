"""Property suites behind `pladapt verify`.

Each suite returns ``(passed, detail)``. `inject_fault` swaps a backward helper in `src.ops`
for a subtly wrong one so the gradient suites can be shown to fail.
"""
import logging
import time
from contextlib import contextmanager
from unittest import mock

import numpy as np
from scipy.special import softmax

from src import ops
from src.adaptation import (
    PrototypeBank, PseudoLabel, correct_pseudo_labels, ema_update, pair_two_way, ssim, to_gray,
)
from src.autograd import Tensor, no_tape
from src.decoder import DecoderConfig, infer_target_sourcefree, unify_and_upsample
from src.encoder import Q0, Q_MICRO, encoder_forward
from src.gradcheck import check_parameters, finite_diff_check
from src.model import QuadFormer
from src.objectives import (
    DiscriminatorWeights, discriminator_loss, generator_loss, seg_cross_entropy, total_loss,
)
from src.utils.errors import PLAdaptError


logger = logging.getLogger('pladapt.verify')

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4
DISC_TOLERANCE = 1e-5


_matmul_backward = ops._matmul_backward


def _faulty_matmul(a, b, g):
    grad_a, grad_b = _matmul_backward(a, b, g)
    return grad_a * 1.01, grad_b


def _faulty_softmax(s, g):
    return s * g


def _faulty_layer_norm(xhat, inv_std, gamma, g):
    return g * gamma * inv_std, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0), g.reshape(-1, xhat.shape[-1]).sum(axis=0)


def _faulty_gelu(x):
    return 0.5 * (1.0 + np.tanh(x))


FAULTS = {
    'matmul': ('_matmul_backward', _faulty_matmul),
    'softmax': ('_softmax_backward', _faulty_softmax),
    'layer_norm': ('_layer_norm_backward', _faulty_layer_norm),
    'gelu': ('_gelu_derivative', _faulty_gelu),
}


@contextmanager
def inject_fault(name):
    attribute, replacement = FAULTS[name]
    with mock.patch.object(ops, attribute, replacement):
        yield


# fixtures

def micro_model(seed=0):
    decoder_config = DecoderConfig(stage_channels=tuple(Q_MICRO.channels), embed_dim=8)
    return QuadFormer(Q_MICRO, decoder_config, seed=seed)


def micro_batch(rng, size=8):
    img_s = rng.random((3, size, size))
    img_t = rng.random((3, size, size))
    labels_s = (rng.random((size, size)) < 0.3).astype(np.uint8)
    labels_t = (rng.random((size, size)) < 0.3).astype(np.uint8)
    valid_t = rng.random((size, size)) < 0.7
    return img_s, img_t, labels_s, labels_t, valid_t


def micro_total_loss(model, disc, batch):
    img_s, img_t, labels_s, labels_t, valid_t = batch
    size = labels_s.shape
    mask_s, mask_t = model.forward(Tensor(img_s), Tensor(img_t))
    l_s, _ = seg_cross_entropy(mask_s, labels_s, class_weights=(1.0, 10.0))
    l_t, _ = seg_cross_entropy(mask_t, labels_t, valid_t, class_weights=(1.0, 10.0))
    return total_loss(l_s, l_t, generator_loss(mask_t.probs(*size), disc))


# suites

def suite_op_gradients(rng):
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = rng.normal(size=(6, 5))
    gamma, beta = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
    kernel = Tensor(rng.normal(size=(1, 1, 3, 3)))
    coef = rng.normal(size=(4, 5))
    img = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
    small = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    onehot = np.eye(6)[rng.integers(0, 6, size=4)]
    checks = {
        'sum': (lambda t: ops.sum(t), x),
        'matmul': (lambda t: ops.sum(ops.mul(ops.matmul(t, w), coef)), x),
        'softmax_xent': (lambda t: ops.neg(ops.sum(ops.mul(ops.log_softmax_lastdim(t), onehot))), x),
        'softmax': (lambda t: ops.sum(ops.mul(ops.softmax_lastdim(t), np.arange(6.0))), x),
        'layer_norm': (lambda t: ops.sum(ops.mul(ops.layer_norm(t, gamma, beta), np.arange(6.0))), x),
        'gelu': (lambda t: ops.sum(ops.gelu(t)), x),
        'softplus': (lambda t: ops.sum(ops.softplus(t)), x),
        'conv2d': (lambda t: ops.sum(ops.mul(ops.conv2d(t, kernel, padding=1), t)), img),
        'upsample': (lambda t: ops.sum(ops.mul(ops.upsample_bilinear(t, 5, 7), np.arange(35.0).reshape(1, 5, 7))), small),
    }
    errors = {name: finite_diff_check(f, t) for name, (f, t) in checks.items()}
    worst = max(errors, key=errors.get)
    return errors[worst] < OP_TOLERANCE, f'worst op {worst}: {errors[worst]:.2e}'


def suite_model_gradients(rng):
    model = micro_model(seed=int(rng.integers(1 << 30)))
    disc = DiscriminatorWeights(2, (4, 4, 1), rng)
    batch = micro_batch(rng)
    errors = check_parameters(lambda: micro_total_loss(model, disc, batch), model.parameters(), h=1e-5, rng=rng)
    worst = max(errors, key=errors.get)
    return errors[worst] < MODEL_TOLERANCE, f'{len(errors)} parameter groups, worst {worst}: {errors[worst]:.2e}'


def suite_discriminator_gradients(rng):
    disc = DiscriminatorWeights(2, (4, 4, 1), rng)
    probs_s = Tensor(softmax(rng.normal(size=(2, 8, 8)), axis=0))
    probs_t = Tensor(softmax(rng.normal(size=(2, 8, 8)), axis=0), requires_grad=True)
    params = list(disc.named_parameters())
    errors = {}
    for loss, loss_fn in (('d_loss', lambda: discriminator_loss(probs_s, probs_t, disc)),
                          ('g_loss', lambda: generator_loss(probs_t, disc))):
        for name, err in check_parameters(loss_fn, params, h=1e-6, coords_per_param=8, rng=rng).items():
            errors[f'{loss}/{name}'] = err
    errors['g_loss/probs_t'] = finite_diff_check(lambda t: generator_loss(t, disc), probs_t, h=1e-6)
    worst = max(errors, key=errors.get)
    return errors[worst] < DISC_TOLERANCE, f'{len(errors)} gradient groups, worst {worst}: {errors[worst]:.2e}'


def suite_shape_chain(rng):
    model = QuadFormer(Q0, DecoderConfig(stage_channels=tuple(Q0.channels), embed_dim=64), seed=0)
    img = Tensor(rng.random((3, 64, 64)))
    with no_tape():
        stages = encoder_forward(img, img, model.encoder)
        counts = [q.f_s.shape[0] for q in stages]
        phi = unify_and_upsample([(q.f_t, q.h, q.w) for q in stages], model.decoder, 'dec')
        _, mask_t = model.forward(img, img)
    ok = counts == [256, 64, 16, 4] and phi.shape == (256, 256) and mask_t.features.shape == (256, 512)
    return ok, f'tokens {counts}, phi {phi.shape}, fuse input {mask_t.features.shape}'


def suite_cross_degeneracy(rng):
    model = micro_model(seed=int(rng.integers(1 << 30)))
    img = Tensor(rng.random((3, 16, 16)))
    with no_tape():
        stages = encoder_forward(img, img, model.encoder)
        gap = max(max(np.abs(q.f_ts.data - q.f_s.data).max(), np.abs(q.f_st.data - q.f_t.data).max()) for q in stages)
        _, paired = model.forward(img, img)
        free = infer_target_sourcefree(img, model.encoder, model.decoder)
    exact = np.array_equal(paired.logits.data, free.logits.data)
    return gap <= 1e-12 and exact, f'max branch gap {gap:.1e}, source-free exact: {exact}'


def ssim_reference(a, b, window=8, c1=0.01 ** 2, c2=0.03 ** 2):
    """Per-window direct formula with explicit loops."""
    a, b = to_gray(a), to_gray(b)
    values = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            pa, pb = a[i:i + window, j:j + window].ravel(), b[i:i + window, j:j + window].ravel()
            ma, mb = pa.sum() / pa.size, pb.sum() / pb.size
            va = sum((x - ma) ** 2 for x in pa) / pa.size
            vb = sum((x - mb) ** 2 for x in pb) / pb.size
            cov = sum((x - ma) * (y - mb) for x, y in zip(pa, pb)) / pa.size
            values.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return sum(values) / len(values)


def suite_ssim(rng, n_pairs=100):
    worst = 0.0
    identical = True
    for _ in range(n_pairs):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        worst = max(worst, abs(ssim(a, b) - ssim_reference(a, b)))
        identical &= ssim(a, a) == 1.0
    return worst < 1e-9 and identical, f'max deviation {worst:.1e} over {n_pairs} pairs, ssim(a, a) == 1: {identical}'


def suite_ema(rng, steps=500):
    v = rng.normal(size=16)
    bank = PrototypeBank.zeros(1, 16)
    for _ in range(steps):
        bank = ema_update(bank, 0, v)
    err = np.abs(bank.eta[0] - (1 - bank.lam ** steps) * v).max()
    return err < 1e-9, f'closed-form deviation after {steps} updates: {err:.1e}'


def denoising_case(rng, n=400, dim=8, noise=0.2):
    """Two separated feature clusters with a fraction of flipped soft warm-up labels."""
    centers = np.stack([np.eye(dim)[0], np.eye(dim)[1]])
    truth = rng.integers(0, 2, size=n)
    features = centers[truth] + 0.05 * rng.normal(size=(n, dim))
    features /= np.linalg.norm(features, axis=1, keepdims=True)
    flipped = rng.random(n) < noise
    noisy = np.where(flipped, 1 - truth, truth)
    probs = np.where(np.eye(2)[noisy].astype(bool), 0.6, 0.4).T.reshape(2, 20, n // 20)
    bank = PrototypeBank(eta=np.stack([features[truth == c].mean(axis=0) for c in (0, 1)]),
                         counts=np.ones(2), initialized=True)
    return features, truth, flipped, probs, bank


def suite_denoising(rng):
    features, truth, flipped, probs, bank = denoising_case(rng)
    label = PseudoLabel.from_probs(probs, tau=0.9)
    corrected = correct_pseudo_labels(label, features, probs.shape[1:], bank, temperature=1.0, tau=0.9)
    recovered = (corrected.labels.ravel() == truth)[flipped].mean()
    norm_err = np.abs(corrected.probs.sum(axis=0) - 1).max()
    return recovered >= 0.95 and norm_err <= 1e-9, f'recovered {100 * recovered:.1f}% of flips, normalization {norm_err:.1e}'


def suite_pairing(rng, corpora=20):
    for _ in range(corpora):
        sources = [(f's{i}', rng.random((3, 16, 16))) for i in range(5)]
        targets = [(f't{j}', rng.random((3, 16, 16))) for j in range(5)]
        pairs = pair_two_way(sources, targets, workers=1)
        scores = np.array([[ssim_reference(a, b) for _, b in targets] for _, a in sources])
        expected = {(f's{i}', f't{int(np.argmax(scores[i]))}') for i in range(5)}
        expected |= {(f's{int(np.argmax(scores[:, j]))}', f't{j}') for j in range(5)}
        if set(pairs.keys()) != expected or len(pairs.sources()) != 5 or len(pairs.targets()) != 5:
            return False, f'pairing differs from exhaustive search: {sorted(pairs.keys())} vs {sorted(expected)}'
    return True, f'{corpora} random 5x5 corpora match exhaustive search'


SUITES = {
    'op_gradients': suite_op_gradients,
    'model_gradients': suite_model_gradients,
    'shape_chain': suite_shape_chain,
    'cross_degeneracy': suite_cross_degeneracy,
    'ssim': suite_ssim,
    'ema': suite_ema,
    'denoising': suite_denoising,
    'pairing': suite_pairing,
    'disc_gradients': suite_discriminator_gradients,
}


def run_verify(names=None, seed=0):
    """Run the named suites (all by default); returns True iff every one passes."""
    passed = True
    for name in names or SUITES:
        start = time.perf_counter()
        try:
            ok, detail = SUITES[name](np.random.default_rng([seed, list(SUITES).index(name)]))
        except (ArithmeticError, PLAdaptError) as e:
            ok, detail = False, f'{type(e).__name__}: {e}'
        logger.info('%-17s %s  %s (%.1fs)', name, 'PASS' if ok else 'FAIL', detail, time.perf_counter() - start)
        passed &= ok
    return passed
