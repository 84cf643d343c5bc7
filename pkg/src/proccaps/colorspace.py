"""sRGB / CIELab conversion, ab-gamut quantization and soft-encoding.

All functions operate on numpy arrays whose last axis holds the colour
channels: ``(..., 3)`` for RGB and Lab, ``(..., 2)`` for chroma planes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

# sRGB primaries -> XYZ (IEC 61966-2-1).
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# D65 white as seen through the same matrix, so that RGB white maps to a=b=0.
WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0

CHROMA_MIN = -110.0
CHROMA_MAX = 110.0


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(rgb) -> np.ndarray:
    """Convert sRGB values in [0, 1] to CIELab (D65)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T
    fx, fy, fz = np.moveaxis(_f(xyz / WHITE_D65), -1, 0)
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return np.stack([L, a, b], axis=-1)


def lab_to_rgb(lab) -> np.ndarray:
    """Convert CIELab (D65) to sRGB, clipping out-of-gamut values to [0, 1].

    The number of clipped samples is logged at DEBUG level.
    """
    lab = np.asarray(lab, dtype=np.float64)
    L, a, b = np.moveaxis(lab, -1, 0)
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * WHITE_D65
    rgb = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
    outside = (rgb < 0.0) | (rgb > 1.0)
    n_clipped = int(outside.any(axis=-1).sum())
    if n_clipped:
        log.debug("lab_to_rgb: clipped %d out-of-gamut samples", n_clipped)
    return np.clip(rgb, 0.0, 1.0)


def split_luminance(lab) -> tuple[np.ndarray, np.ndarray]:
    """Split a Lab array into the network input ``L/100`` and raw ``(a, b)``."""
    lab = np.asarray(lab, dtype=np.float64)
    return lab[..., 0] / 100.0, lab[..., 1:].copy()


def merge_luminance(L_plane, ab) -> np.ndarray:
    """Inverse of :func:`split_luminance`; ``L_plane`` is in [0, 1]."""
    L_plane = np.asarray(L_plane, dtype=np.float64)
    return np.concatenate([(L_plane * 100.0)[..., None], np.asarray(ab, dtype=np.float64)], axis=-1)


def srgb_sweep(steps: int) -> np.ndarray:
    """All RGB triples on a uniform lattice of ``steps`` intervals per axis.

    Lattices are nested: the points for ``steps`` are a subset of
    those for ``2 * steps``.
    """
    t = np.linspace(0.0, 1.0, steps + 1)
    r, g, b = np.meshgrid(t, t, t, indexing="ij")
    return np.stack([r, g, b], axis=-1).reshape(-1, 3)


class GamutError(RuntimeError):
    pass


@dataclass(frozen=True)
class GamutGrid:
    """Quantized in-gamut ab bins.

    ``centers`` has shape ``(Q, 2)`` and is sorted row-major by ``a`` then
    ``b``.  ``weights`` holds one class-rebalancing weight per bin.
    """

    bin_size: float
    centers: np.ndarray
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        w = np.ones(len(centers)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(centers),):
            raise ValueError(f"weights shape {w.shape} does not match Q={len(centers)}")
        if not (np.all(np.isfinite(w)) and np.all(w > 0)):
            raise ValueError("rarity weights must be finite and strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def Q(self) -> int:
        return len(self.centers)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.centers)

    def index_of(self, ab) -> np.ndarray:
        """Id of the nearest bin centre for every ``(a, b)`` pair."""
        ab = np.asarray(ab, dtype=np.float64)
        _, idx = self._tree.query(ab.reshape(-1, 2))
        return idx.reshape(ab.shape[:-1])

    def nearest(self, ab, k: int) -> tuple[np.ndarray, np.ndarray]:
        ab = np.asarray(ab, dtype=np.float64).reshape(-1, 2)
        d, idx = self._tree.query(ab, k=k)
        return d.reshape(-1, k), idx.reshape(-1, k)

    def with_weights(self, weights) -> "GamutGrid":
        return GamutGrid(self.bin_size, self.centers, weights)

    def to_text(self) -> str:
        lines = [f"gamut v1 bin={self.bin_size:g} Q={self.Q}"]
        for (a, b), w in zip(self.centers, self.weights):
            lines.append(f"{a:g} {b:g} {float(w)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GamutGrid":
        rows = [ln for ln in text.splitlines() if ln.strip()]
        head = rows[0].split() if rows else []
        if len(head) != 4 or head[:2] != ["gamut", "v1"]:
            raise ValueError(f"not a v1 gamut table: {rows[:1]!r}")
        fields = dict(tok.split("=", 1) for tok in head[2:])
        q = int(fields["Q"])
        body = np.array([[float(x) for x in ln.split()] for ln in rows[1:]]).reshape(-1, 3)
        if len(body) != q:
            raise ValueError(f"gamut table declares Q={q} but has {len(body)} rows")
        return cls(float(fields["bin"]), body[:, :2], body[:, 2])


def build_gamut_grid(bin_size: float = 10.0, sweep_steps: int = 64) -> GamutGrid:
    """Enumerate the ab bins reached by a dense sRGB sweep.

    Bin centres sit on multiples of ``bin_size`` within the chroma range;
    a bin is kept iff some swept colour falls in its cell (nearest centre).
    """
    if bin_size <= 0:
        raise ValueError("bin_size must be positive")
    lab = rgb_to_lab(srgb_sweep(sweep_steps))
    n_max = int(np.floor(CHROMA_MAX / bin_size))
    idx = np.floor(lab[:, 1:] / bin_size + 0.5).astype(np.int64)
    idx = np.clip(idx, -n_max, n_max)
    cells = np.unique(idx, axis=0)  # lexicographic: a first, then b
    if len(cells) == 0:
        raise GamutError("no in-gamut bins found")
    return GamutGrid(bin_size, cells.astype(np.float64) * bin_size)


def clamp_chroma(ab) -> np.ndarray:
    return np.clip(np.asarray(ab, dtype=np.float64), CHROMA_MIN, CHROMA_MAX)


def soft_encode(ab, grid: GamutGrid, k: int = 5, sigma: float = 5.0) -> np.ndarray:
    """Gaussian-weighted encoding of ab values over their ``k`` nearest bins.

    Returns an array of shape ``ab.shape[:-1] + (Q,)`` whose last axis sums
    to one.
    """
    ab = clamp_chroma(ab)
    k = min(k, grid.Q)
    d, idx = grid.nearest(ab, k)
    w = np.exp(-(d**2) / (2.0 * sigma**2))
    # Rows far from every centre underflow; fall back to the nearest bin.
    total = w.sum(axis=1, keepdims=True)
    dead = total[:, 0] == 0
    w[dead] = 0.0
    w[dead, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    out = np.zeros((len(w), grid.Q))
    np.put_along_axis(out, idx, w, axis=1)
    return out.reshape(ab.shape[:-1] + (grid.Q,))


def rarity_weights(encodings: Iterable, grid: GamutGrid, lam: float = 0.5) -> np.ndarray:
    """Class-rebalancing weights from a stream of soft encodings.

    The empirical bin distribution is mixed with the uniform one,
    inverted, and normalized to unit expectation under the empirical
    distribution.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    counts = np.zeros(grid.Q)
    seen = False
    for z in encodings:
        z = np.asarray(z, dtype=np.float64)
        counts += z.reshape(-1, grid.Q).sum(axis=0)
        seen = True
    if not seen or counts.sum() <= 0:
        raise ValueError("rarity_weights needs at least one non-empty encoding")
    p = counts / counts.sum()
    return weights_from_distribution(p, lam)


def weights_from_distribution(p, lam: float = 0.5) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    w = 1.0 / ((1.0 - lam) * p + lam / len(p))
    return w / np.dot(p, w)
