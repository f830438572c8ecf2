"""Training-time augmentation: horizontal flip, +/-90 degree rotation, patch masking.

Images are (height, width, channels) arrays. Labels never pass through
here: every transform keeps the set of objects in the frame unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class AugmentSpec:
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    mask: bool = True
    mask_patch_size: int = 30
    mask_prob_per_patch: float = 0.5
    fill_value: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("flip_prob", "rotate_prob", "mask_prob_per_patch"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.mask_patch_size < 1:
            raise ConfigError(f"mask_patch_size must be at least 1, got {self.mask_patch_size}")

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(flip_prob=0.0, rotate_prob=0.0, mask=False)


def hflip(image):
    return image[:, ::-1].copy()


def rot90(image, direction: int):
    """Rotate by +90 (counter-clockwise) or -90 (clockwise) degrees."""
    if direction == 90:
        return np.rot90(image, 1).copy()
    if direction == -90:
        return np.rot90(image, -1).copy()
    raise InputError(f"rotation must be +90 or -90, got {direction}")


def mask_cells(shape, patch_size: int, prob: float, rng: np.random.Generator):
    """Boolean (rows, cols) grid of hidden cells; one uniform draw per cell, row-major."""
    h, w = shape[:2]
    rows = -(-h // patch_size)
    cols = -(-w // patch_size)
    return rng.random((rows, cols)) < prob


def mask_patches(image, spec: AugmentSpec, rng: np.random.Generator):
    """Replace each cell of a fixed ``patch_size`` grid by ``fill_value`` with
    probability ``mask_prob_per_patch``. Edge cells may be smaller."""
    if spec.fill_value is None:
        raise ConfigError("mask_patches needs fill_value (the train-set mean pixel)")
    fill = np.asarray(spec.fill_value, dtype=image.dtype)
    hidden = mask_cells(image.shape, spec.mask_patch_size, spec.mask_prob_per_patch, rng)
    out = image.copy()
    p = spec.mask_patch_size
    for r, c in zip(*np.nonzero(hidden)):
        out[r * p:(r + 1) * p, c * p:(c + 1) * p] = fill
    return out


def augment_image(image, spec: AugmentSpec, rng: np.random.Generator):
    # draws happen unconditionally so the stream layout never depends on the probabilities
    u_flip, u_rot, u_dir = rng.random(3)
    if u_flip < spec.flip_prob:
        image = hflip(image)
    if u_rot < spec.rotate_prob:
        image = rot90(image, 90 if u_dir < 0.5 else -90)
    if spec.mask:
        image = mask_patches(image, spec, rng)
    return image


def image_rng(key, index: int) -> np.random.Generator:
    """Independent stream for one image, derived from e.g. (seed, epoch, batch)."""
    return np.random.default_rng([*map(int, key), int(index)])


def augment_batch(images, spec: AugmentSpec, key):
    """Augment each image with its own stream ``image_rng(key, i)``.

    Returns a list because +/-90 degree rotations change the image shape.
    """
    return [augment_image(img, spec, image_rng(key, i)) for i, img in enumerate(images)]
