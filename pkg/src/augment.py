from dataclasses import dataclass, field

import numpy as np

from src.utils.errors import ContractError


CROP_RETRIES = 8


@dataclass(frozen=True)
class Transform:
    flip: bool
    top: int
    left: int
    size: int


@dataclass
class Augmented:
    image: np.ndarray
    label: np.ndarray
    transform: Transform
    extras: dict = field(default_factory=dict)


def hflip(array):
    """Flip the last (width) axis."""
    return np.ascontiguousarray(array[..., ::-1])


def photometric(image, rng, brightness=0.1, contrast=(0.8, 1.2), channel=0.05):
    out = image + rng.uniform(-brightness, brightness)
    mean = out.mean()
    out = mean + (out - mean) * rng.uniform(*contrast)
    out = out * (1.0 + rng.uniform(-channel, channel, size=(image.shape[0], 1, 1)))
    return np.clip(out, 0.0, 1.0)


def crop_window(rng, height, width, size, label=None):
    """Top-left corner of a size x size window, retried to contain a positive label pixel."""
    if size > height or size > width:
        raise ContractError(f'crop {size} exceeds image {height}x{width}')
    for _ in range(CROP_RETRIES):
        top = int(rng.integers(0, height - size + 1))
        left = int(rng.integers(0, width - size + 1))
        if label is None or label[top:top + size, left:left + size].any():
            break
    return top, left


def _crop(array, top, left, size):
    return array[..., top:top + size, left:left + size]


def augment(image, label, rng, crop, extras=None):
    """Random flip, photometric distortion (image only) and crop.

    `extras` are per-pixel arrays ([..., H, W]) that follow the geometric part exactly.
    `label` may be None for unlabelled images.
    """
    extras = extras or {}
    flip = bool(rng.random() < 0.5)
    if flip:
        image = hflip(image)
        label = None if label is None else hflip(label)
        extras = {k: hflip(v) for k, v in extras.items()}
    image = photometric(image, rng)
    top, left = crop_window(rng, image.shape[1], image.shape[2], crop, label)
    return Augmented(
        image=_crop(image, top, left, crop),
        label=None if label is None else _crop(label, top, left, crop),
        transform=Transform(flip, top, left, crop),
        extras={k: _crop(v, top, left, crop) for k, v in extras.items()},
    )


def restore(cropped, full, transform):
    """Write a crop computed on the augmented view back into a copy of the full-size array."""
    out = hflip(full) if transform.flip else full.copy()
    out[..., transform.top:transform.top + transform.size, transform.left:transform.left + transform.size] = cropped
    return hflip(out) if transform.flip else out
