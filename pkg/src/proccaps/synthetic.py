"""Deterministic synthetic images for desk-scale runs and tests."""

from __future__ import annotations

import numpy as np

from .colorspace import lab_to_rgb


def reef_image(size: int = 32, seed: int = 0) -> np.ndarray:
    """A colourful RGB scene: water gradient plus a few saturated blobs.

    Hue is tied to brightness so that chroma is partly predictable from L.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    L = 35 + 30 * (1 - yy)
    a = -20 + 10 * xx
    b = -25 + 15 * yy
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.12, 0.22)
        mask = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2)))
        hue = rng.uniform(0, 2 * np.pi)
        L = L + 20 * mask
        a = a + 45 * np.cos(hue) * mask
        b = b + 45 * np.sin(hue) * mask
    lab = np.stack([np.clip(L, 0, 100), a, b], axis=-1)
    return lab_to_rgb(lab)


def blob_classes(n_classes: int = 7, per_class: int = 10, size: int = 32, seed: int = 0):
    """Luminance images whose class is the angular position of a bright blob.

    Returns ``(images, labels)`` with images ``(N, size, size)`` in [0, 1].
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    images, labels = [], []
    for c in range(n_classes):
        angle = 2 * np.pi * c / n_classes
        for _ in range(per_class):
            jitter = rng.normal(0, 0.15)
            rad = 0.3 + rng.normal(0, 0.02)
            cy = 0.5 + rad * np.sin(angle + jitter)
            cx = 0.5 + rad * np.cos(angle + jitter)
            blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.08**2)))
            img = 0.2 + 0.6 * blob + rng.normal(0, 0.03, size=(size, size))
            images.append(np.clip(img, 0, 1))
            labels.append(c)
    return np.stack(images), np.array(labels)
