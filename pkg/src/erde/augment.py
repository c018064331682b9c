"""Training-time image augmentation.

Transforms are applied per example in a fixed order (flip, rotate, translate,
crop, erase), each drawing from the supplied generator, so a fixed seed yields
a bit-identical augmented batch.  Disabled switches draw nothing and leave the
batch untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = False
    rotate: bool = False
    translate: bool = False
    crop: bool = False
    erase: bool = False
    flip_p: float = 0.5
    max_rotate_deg: float = 15.0
    max_translate_frac: float = 0.1
    crop_pad: int = 4
    erase_area: tuple = (0.02, 0.20)

    def any_enabled(self):
        return self.flip or self.rotate or self.translate or self.crop or self.erase

    @staticmethod
    def from_names(names):
        known = {"flip", "rotate", "translate", "crop", "erase"}
        bad = set(names) - known
        if bad:
            raise ValueError(f"unknown augmentation switches: {sorted(bad)}")
        return AugmentConfig(**{name: True for name in names})


def _random_crop(img, pad, rng):
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return padded[:, top:top + h, left:left + w]


def _random_erase(img, area_range, rng):
    c, h, w = img.shape
    frac = rng.uniform(area_range[0], area_range[1])
    target = frac * h * w
    eh = max(1, min(h, int(round(np.sqrt(target)))))
    ew = max(1, min(w, int(round(target / eh))))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    out = img.copy()
    out[:, top:top + eh, left:left + ew] = 0
    return out


def augment_batch(images, rng, config):
    """Apply the enabled transforms to a (B, C, H, W) batch."""
    if images.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) batch, got {images.shape}")
    if not config.any_enabled():
        return images
    out = np.empty_like(images)
    h, w = images.shape[2], images.shape[3]
    degenerate = h * w < 4  # 1x1 images pass through crop/erase unchanged
    for b in range(images.shape[0]):
        img = images[b]
        if config.flip:
            if rng.random() < config.flip_p:
                img = img[:, :, ::-1]
        if config.rotate:
            angle = rng.uniform(-config.max_rotate_deg, config.max_rotate_deg)
            img = ndimage.rotate(img, angle, axes=(2, 1), reshape=False,
                                 order=1, mode="constant", cval=0.0)
        if config.translate:
            dy = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * h
            dx = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * w
            img = ndimage.shift(img, (0.0, dy, dx), order=1, mode="constant", cval=0.0)
        if config.crop and not degenerate:
            img = _random_crop(img, config.crop_pad, rng)
        if config.erase and not degenerate:
            img = _random_erase(img, config.erase_area, rng)
        out[b] = img
    return out
