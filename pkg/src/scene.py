"""Procedural two-domain power-line scenes.

Lines run border to border with endpoints snapped to pixel centres. The label of a pixel is
1 when its centre lies within width/2 of the segment; the image carries an anti-aliased
coverage of the same geometry over a textured background.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.ndimage import zoom

from src.utils.common import max_workers
from src.utils.errors import ContractError


logger = logging.getLogger('pladapt.scene')

BACKGROUNDS = ('flat', 'gradient', 'noise')
DOMAINS = ('source', 'target')


@dataclass(frozen=True)
class Appearance:
    """Everything that is allowed to differ between the two domains."""
    backgrounds: Tuple[str, ...]
    background_level: Tuple[float, float]
    line_contrast: Tuple[float, float]
    tint: float
    noise_std: float

    def __post_init__(self):
        unknown = set(self.backgrounds) - set(BACKGROUNDS)
        if not self.backgrounds or unknown:
            raise ContractError(f'background families must be drawn from {BACKGROUNDS}, got {self.backgrounds}')


SOURCE_APPEARANCE = Appearance(('flat', 'gradient'), (0.6, 0.95), (0.45, 0.7), 0.05, 0.0)
TARGET_APPEARANCE = Appearance(('noise',), (0.2, 0.5), (0.08, 0.2), 0.15, 0.02)


@dataclass(frozen=True)
class SceneSpec:
    domain: str
    appearance: Appearance
    size: int = 64
    lines: Tuple[int, int] = (1, 3)
    widths: Tuple[int, int] = (1, 3)
    seed: int = 42

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ContractError(f'domain must be one of {DOMAINS}, got {self.domain!r}')
        if self.size < 32 or self.size % 32:
            raise ContractError(f'image size must be a positive multiple of 32, got {self.size}')
        if not 1 <= self.lines[0] <= self.lines[1]:
            raise ContractError(f'line count range must satisfy 1 <= min <= max, got {self.lines}')
        if not 1 <= self.widths[0] <= self.widths[1] <= 3:
            raise ContractError(f'line widths must lie in [1, 3], got {self.widths}')


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray
    id: int


def sample_rng(spec, sample_id):
    return np.random.default_rng([spec.seed, DOMAINS.index(spec.domain), sample_id])


def segment_distance(p0, p1, size):
    """Distance from every pixel centre of a size x size grid to the segment p0-p1 (row, col)."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    p0, p1 = np.asarray(p0, dtype=np.float64), np.asarray(p1, dtype=np.float64)
    direction = p1 - p0
    length_sq = direction @ direction
    t = ((rows - p0[0]) * direction[0] + (cols - p0[1]) * direction[1]) / length_sq
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(rows - (p0[0] + t * direction[0]), cols - (p0[1] + t * direction[1]))


def random_endpoints(rng, size):
    """Endpoints on opposite borders; the slope never exceeds 1 along the chosen axis."""
    a, b = rng.integers(0, size, size=2)
    if rng.random() < 0.5:
        return (a, 0), (b, size - 1)
    return (0, a), (size - 1, b)


def value_noise(rng, size, octaves=3):
    field = np.zeros((size, size))
    amplitude, total = 1.0, 0.0
    for octave in range(octaves):
        cells = 4 * 2 ** octave
        coarse = rng.random((cells + 1, cells + 1))
        field += amplitude * zoom(coarse, size / (cells + 1), order=3)[:size, :size]
        total += amplitude
        amplitude *= 0.5
    field /= total
    return (field - field.min()) / max(field.max() - field.min(), 1e-12)


def render_background(rng, spec):
    appearance, size = spec.appearance, spec.size
    family = appearance.backgrounds[rng.integers(len(appearance.backgrounds))]
    level = rng.uniform(*appearance.background_level)
    if family == 'flat':
        gray = np.full((size, size), level)
    elif family == 'gradient':
        angle = rng.uniform(0.0, 2.0 * np.pi)
        rows, cols = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
        ramp = np.cos(angle) * rows + np.sin(angle) * cols
        gray = level + rng.uniform(0.1, 0.3) * ramp
    else:
        gray = level + rng.uniform(0.1, 0.3) * (value_noise(rng, size) - 0.5)
    tint = 1.0 + rng.uniform(-appearance.tint, appearance.tint, size=3)
    return np.clip(gray[None] * tint[:, None, None], 0.0, 1.0), level


def render_sample(spec, sample_id):
    rng = sample_rng(spec, sample_id)
    image, level = render_background(rng, spec)
    label = np.zeros((spec.size, spec.size), dtype=np.uint8)
    for _ in range(rng.integers(spec.lines[0], spec.lines[1] + 1)):
        width = int(rng.integers(spec.widths[0], spec.widths[1] + 1))
        distance = segment_distance(*random_endpoints(rng, spec.size), spec.size)
        label |= (distance <= width / 2).astype(np.uint8)
        coverage = np.clip(width / 2 + 0.5 - distance, 0.0, 1.0)
        intensity = np.clip(level - rng.uniform(*spec.appearance.line_contrast), 0.0, 1.0)
        image = image * (1.0 - coverage) + intensity * coverage
    if spec.appearance.noise_std:
        image = image + rng.normal(0.0, spec.appearance.noise_std, size=image.shape)
    return Sample(image=np.clip(image, 0.0, 1.0), label=label, id=sample_id)


def generate_domain(spec, n, start=0, workers=None):
    """Samples start..start+n-1 of a domain; each one depends only on (seed, domain, id)."""
    if n < 1:
        raise ContractError(f'cannot generate {n} samples')
    with ThreadPoolExecutor(max_workers=max_workers(workers)) as pool:
        samples = list(pool.map(lambda i: render_sample(spec, i), range(start, start + n)))
    logger.debug('generated %d %s samples', n, spec.domain)
    return samples
