"""Seeded synthetic image sets for demos and end-to-end tests.

Two families, both with three classes whose pooled activations form
tight, well-separated blobs in feature space: colored Gaussian bumps
(literal blobs, good for clustering demos) and phase-randomized colored
gratings (members of a class share orientation/frequency/color but not
phase, so the averaged initial image genuinely differs from the averaged
target activation and the optimizer has work to do).
"""

from __future__ import annotations

import numpy as np

_CLASS_COLORS = (
    (0.95, 0.25, 0.15),
    (0.15, 0.90, 0.30),
    (0.20, 0.30, 0.95),
)
_CLASS_CENTERS = ((0.30, 0.30), (0.70, 0.40), (0.45, 0.75))


def blob_images(n_per_class: int = 10, n_classes: int = 3, size: int = 16,
                noise: float = 0.05, seed: int = 0):
    """Return (images, labels): RGB arrays in [0, 1], shape (3, size, size).

    Each class is one colored bump at a class-specific position; per-image
    jitter in position and amplitude keeps members distinct.
    """
    if not 1 <= n_classes <= len(_CLASS_COLORS):
        raise ValueError(f"n_classes must be in [1, {len(_CLASS_COLORS)}]")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    sigma = size / 6.0
    images, labels = [], []
    for cls in range(n_classes):
        color = np.asarray(_CLASS_COLORS[cls])
        cy, cx = (c * (size - 1) for c in _CLASS_CENTERS[cls])
        for _ in range(n_per_class):
            jy = cy + rng.normal(scale=size * 0.03)
            jx = cx + rng.normal(scale=size * 0.03)
            amp = rng.uniform(0.8, 1.0)
            bump = amp * np.exp(-((yy - jy) ** 2 + (xx - jx) ** 2) / (2 * sigma**2))
            img = color[:, None, None] * bump[None]
            img += rng.uniform(0.0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    return images, np.asarray(labels)


_GRATING_FREQS = (3.0, 4.0, 5.0)


def grating_images(n_per_class: int = 10, n_classes: int = 3, size: int = 16,
                   noise: float = 0.02, seed: int = 0):
    """Return (images, labels): phase-randomized colored gratings.

    Orientation, frequency and color identify the class; each member
    draws its own phase, so averaging members cancels the texture while
    every individual activation keeps it.
    """
    if not 1 <= n_classes <= len(_CLASS_COLORS):
        raise ValueError(f"n_classes must be in [1, {len(_CLASS_COLORS)}]")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images, labels = [], []
    for cls in range(n_classes):
        theta = cls * np.pi / n_classes
        freq = _GRATING_FREQS[cls]
        color = np.asarray(_CLASS_COLORS[cls])
        axis = np.cos(theta) * xx + np.sin(theta) * yy
        for _ in range(n_per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(2.0 * np.pi * freq * axis / size + phase)
            img = color[:, None, None] * (0.5 + 0.45 * wave)[None]
            img += rng.uniform(0.0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    return images, np.asarray(labels)
