"""Self-training machinery: warm-up pseudo labels, prototype bank, online correction, SSIM pairing."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import zoom
from tqdm import tqdm

from src import ops
from src.autograd import no_tape
from src.utils.common import max_workers
from src.utils.errors import ContractError, ShapeError


logger = logging.getLogger('pladapt.adaptation')

EMA_MOMENTUM = 0.9999
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PAIRING_SIZE = 64


# pseudo labels

@dataclass
class PseudoLabel:
    probs0: np.ndarray
    probs: np.ndarray
    valid: np.ndarray
    provenance: str = 'warm-up'

    @property
    def labels(self):
        return np.argmax(self.probs, axis=0).astype(np.uint8)

    @classmethod
    def from_probs(cls, probs, tau):
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs0=probs.copy(), probs=probs, valid=probs.max(axis=0) >= tau)


@dataclass
class PseudoLabelSet:
    tau: float
    items: Dict[str, PseudoLabel] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.items[key]

    def __setitem__(self, key, label):
        self.items[key] = label

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def valid_fraction(self):
        total = sum(label.valid.size for label in self.items.values())
        return sum(int(label.valid.sum()) for label in self.items.values()) / max(total, 1)


def warmup_pseudo_labels(model, images, tau):
    """Source-free soft predictions for every (key, image); valid where max prob >= tau."""
    labels = PseudoLabelSet(tau=tau)
    with no_tape():
        for key, img in tqdm(images, desc='pseudo-labels', leave=False):
            _, height, width = img.shape
            probs = model.forward_single(img, domain='target').probabilities(height, width)
            labels[key] = PseudoLabel.from_probs(probs, tau)
    logger.info('pseudo-labelled %d target images, %.1f%% pixels valid at tau=%.2f',
                len(labels), 100 * labels.valid_fraction(), tau)
    return labels


# prototypes

@dataclass
class PrototypeBank:
    eta: np.ndarray
    counts: np.ndarray
    lam: float = EMA_MOMENTUM
    initialized: bool = False

    @classmethod
    def zeros(cls, num_classes, dim, lam=EMA_MOMENTUM):
        return cls(eta=np.zeros((num_classes, dim)), counts=np.zeros(num_classes), lam=lam)

    @property
    def num_classes(self):
        return self.eta.shape[0]

    def state(self):
        return {
            'bank/eta': self.eta.copy(),
            'bank/counts': self.counts.copy(),
            'bank/meta': np.array([self.lam, float(self.initialized)]),
        }

    @classmethod
    def from_state(cls, state):
        lam, initialized = state['bank/meta']
        return cls(eta=np.array(state['bank/eta']), counts=np.array(state['bank/counts']),
                   lam=float(lam), initialized=bool(initialized))


def normalize_features(features):
    norms = np.linalg.norm(features, axis=-1, keepdims=True)
    return features / np.maximum(norms, 1e-12)


def pool_to_grid(probs, h, w):
    """Average-pool a [K, H, W] map onto an h x w grid as [h*w, K] token weights."""
    k, height, width = probs.shape
    if height % h or width % w:
        raise ShapeError(f'cannot pool {height}x{width} onto {h}x{w}')
    pooled = probs.reshape(k, h, height // h, w, width // w).mean(axis=(2, 4))
    return pooled.reshape(k, h * w).T


def batch_prototype(features, probs, c):
    """Probability-weighted centroid of [N, D] features for class c; None when class c has no weight."""
    weights = np.asarray(probs)[:, c]
    total = weights.sum()
    if total <= 0:
        return None
    return weights @ features / total


def ema_update(bank, c, eta_prime):
    eta_prime = np.asarray(eta_prime, dtype=np.float64)
    if not np.all(np.isfinite(eta_prime)):
        raise ContractError(f'non-finite batch prototype for class {c}')
    eta = bank.eta.copy()
    counts = bank.counts.copy()
    eta[c] = bank.lam * eta[c] + (1.0 - bank.lam) * eta_prime
    counts[c] += 1
    return replace(bank, eta=eta, counts=counts)


def update_bank(bank, features, probs):
    for c in range(bank.num_classes):
        eta_prime = batch_prototype(features, probs, c)
        if eta_prime is not None:
            bank = ema_update(bank, c, eta_prime)
    return bank


def initialize_bank(bank, batches):
    """Set every prototype to the weighted centroid of one full pass of (features, token probs)."""
    sums = np.zeros_like(bank.eta)
    weights = np.zeros(bank.num_classes)
    for features, probs in batches:
        sums += probs.T @ features
        weights += probs.sum(axis=0)
    eta = bank.eta.copy()
    for c in range(bank.num_classes):
        if weights[c] > 0:
            eta[c] = sums[c] / weights[c]
        else:
            logger.warning('class %d absent from the initial pass; its prototype stays at zero', c)
    return replace(bank, eta=eta, counts=(weights > 0).astype(np.float64), initialized=True)


def prototype_affinity(features, bank, temperature=1.0):
    """[N, K] softmax over classes of -||f - eta_c|| / T."""
    distances = np.linalg.norm(features[:, None, :] - bank.eta[None, :, :], axis=-1)
    logits = -distances / temperature
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def correct_pseudo_labels(label, features, grid, bank, temperature=1.0, tau=0.9):
    """Reweight the fixed warm-up probabilities by prototype affinity and renormalize.

    `features` are the [h*w, D] augmented target features on the `grid` (h, w).
    """
    if not bank.initialized:
        raise ContractError('prototype bank used before initialization')
    h, w = grid
    k, height, width = label.probs0.shape
    affinity = prototype_affinity(features, bank, temperature).T.reshape(k, h, w)
    with no_tape():
        affinity = ops.upsample_bilinear(ops.as_tensor(affinity), height, width).data
    probs = label.probs0 * affinity
    probs = probs / probs.sum(axis=0, keepdims=True)
    return replace(label, probs=probs, valid=probs.max(axis=0) >= tau, provenance='corrected')


# pairing

def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return np.tensordot(GRAY_WEIGHTS, img, axes=(0, 0))
    return img


def ssim(a, b, window=SSIM_WINDOW, data_range=1.0):
    """Mean SSIM over all sliding window x window patches of two grayscale (or RGB) images."""
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ShapeError(f'ssim needs equal sizes, got {a.shape} and {b.shape}')
    window = min(window, *a.shape)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))

    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


@dataclass(frozen=True)
class Pair:
    source: str
    target: str
    ssim: float
    origin: str = 's-way'


@dataclass
class PairSet:
    pairs: List[Pair] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def keys(self):
        return [(p.source, p.target) for p in self.pairs]

    def sources(self):
        return {p.source for p in self.pairs}

    def targets(self):
        return {p.target for p in self.pairs}


def _prepare(img, size):
    gray = to_gray(img)
    if max(gray.shape) > size:
        gray = zoom(gray, (size / gray.shape[0], size / gray.shape[1]), order=1)
    return gray


def similarity_matrix(sources, targets, size=PAIRING_SIZE, workers=None):
    """[n_s, n_t] SSIM between grayscale, downscaled versions of every source/target image."""
    src = [_prepare(img, size) for img in sources]
    tgt = [_prepare(img, size) for img in targets]

    def row(a):
        return [ssim(a, b) for b in tgt]

    with ThreadPoolExecutor(max_workers=max_workers(workers)) as pool:
        rows = list(tqdm(pool.map(row, src), total=len(src), desc='ssim', leave=False))
    return np.array(rows).reshape(len(src), len(tgt))


def pair_two_way(sources, targets, two_way=True, size=PAIRING_SIZE, workers=None):
    """Union of SSIM-best pairings from both directions.

    `sources` and `targets` are non-empty lists of (key, image). Each source gets its most similar
    target; with `two_way` each target also gets its most similar source. Ties go to the lowest index.
    """
    if not sources or not targets:
        raise ContractError('pairing needs non-empty source and target sets')
    scores = similarity_matrix([img for _, img in sources], [img for _, img in targets], size, workers)

    pairs, seen = [], set()
    candidates = [(i, int(np.argmax(scores[i])), 's-way') for i in range(len(sources))]
    if two_way:
        candidates += [(int(np.argmax(scores[:, j])), j, 't-way') for j in range(len(targets))]
    for i, j, origin in candidates:
        if (i, j) in seen:
            continue
        seen.add((i, j))
        pairs.append(Pair(sources[i][0], targets[j][0], float(scores[i, j]), origin))
    logger.info('paired %d sources and %d targets into %d pairs', len(sources), len(targets), len(pairs))
    return PairSet(pairs)
