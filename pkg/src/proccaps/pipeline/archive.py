"""Luminance-only archiving of colour captures."""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..colorspace import rgb_to_lab
from .data import read_rgb, write_luminance


@dataclass(frozen=True)
class ArchiveReport:
    height: int
    width: int
    bits: int
    raw_color_bytes: int
    raw_luminance_bytes: int
    color_file_bytes: int
    luminance_file_bytes: int

    @property
    def raw_ratio(self) -> Fraction:
        return Fraction(self.raw_luminance_bytes, self.raw_color_bytes)

    def describe(self) -> str:
        return (
            f"{self.width}x{self.height}: raw {self.raw_luminance_bytes} vs {self.raw_color_bytes} bytes "
            f"(ratio {self.raw_ratio}); files {self.luminance_file_bytes} vs {self.color_file_bytes} bytes"
        )


def archive_luminance(color_path, out_path, bits: int = 8) -> ArchiveReport:
    """Write the L channel of ``color_path`` to ``out_path`` and report sizes.

    Raw sizes count uncompressed samples at the same bit depth for both
    images, so the ratio is exactly 1/3.
    """
    rgb = read_rgb(color_path)
    L = rgb_to_lab(rgb)[..., 0]
    write_luminance(out_path, L, bits)
    h, w = L.shape
    per_sample = bits // 8
    return ArchiveReport(
        height=h,
        width=w,
        bits=bits,
        raw_color_bytes=3 * h * w * per_sample,
        raw_luminance_bytes=h * w * per_sample,
        color_file_bytes=os.path.getsize(color_path),
        luminance_file_bytes=os.path.getsize(out_path),
    )


def luminance_of(color_path) -> np.ndarray:
    return rgb_to_lab(read_rgb(color_path))[..., 0]
