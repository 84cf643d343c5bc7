"""Dataset ingestion and image I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from ..colorspace import rgb_to_lab, split_luminance

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    color: Path
    label: Optional[int] = None
    luminance: Optional[Path] = None


@dataclass
class PairedDataset:
    samples: list
    classes: list = field(default_factory=list)
    rejects: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)


def read_rgb(path, size: Optional[int] = None) -> np.ndarray:
    """Decode an image as float RGB in [0, 1], optionally resized to a square."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def write_rgb(path, rgb) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def write_luminance(path, L, bits: int = 8) -> None:
    """Store an L plane (0..100) as a single-channel PNG."""
    L = np.clip(np.asarray(L, dtype=np.float64), 0.0, 100.0)
    if bits == 8:
        Image.fromarray(np.round(L * 255.0 / 100.0).astype(np.uint8), "L").save(path)
    elif bits == 16:
        Image.fromarray(np.round(L * 65535.0 / 100.0).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def read_luminance(path) -> np.ndarray:
    """Inverse of :func:`write_luminance`; returns L in [0, 100]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
        if arr.ndim == 3:
            raise DatasetError(f"{path}: expected a single-channel luminance image")
        scale = 65535.0 if arr.dtype == np.uint16 or im.mode.startswith("I") else 255.0
        return arr.astype(np.float64) * 100.0 / scale


def _decodable(path: Path) -> Optional[str]:
    try:
        with Image.open(path) as im:
            im.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        return str(exc) or exc.__class__.__name__
    return None


def _images_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def ingest_dataset(root, layout: str = "paired") -> PairedDataset:
    """Index a directory of images.

    ``paired``: colour images directly under ``root``; an optional ``root/L``
    directory holds stored luminance files with matching names.
    ``labeled``: one subdirectory per class, ids assigned alphabetically.
    Undecodable files are collected in ``rejects``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"cannot read dataset root {root}")
    ds = PairedDataset(samples=[])
    if layout == "paired":
        lum_dir = root / "L"
        for path in _images_in(root):
            err = _decodable(path)
            if err:
                ds.rejects.append((path, err))
                continue
            lum = lum_dir / path.name if (lum_dir / path.name).is_file() else None
            ds.samples.append(Sample(path, luminance=lum))
    elif layout == "labeled":
        ds.classes = sorted(p.name for p in root.iterdir() if p.is_dir())
        for cid, name in enumerate(ds.classes):
            for path in _images_in(root / name):
                err = _decodable(path)
                if err:
                    ds.rejects.append((path, err))
                    continue
                ds.samples.append(Sample(path, label=cid))
    else:
        raise ValueError(f"unknown layout {layout!r}")
    for path, err in ds.rejects:
        log.warning("rejected %s: %s", path, err)
    if not ds.samples:
        raise DatasetError(f"no decodable images under {root}")
    return ds


def load_color_stack(ds: PairedDataset, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """``(L, ab)`` tensors for every sample, L normalized to [0, 1]."""
    Ls, abs_ = [], []
    for s in ds.samples:
        L_plane, ab = split_luminance(rgb_to_lab(read_rgb(s.color, size)))
        Ls.append(L_plane)
        abs_.append(ab)
    L = torch.tensor(np.stack(Ls), dtype=torch.float32)[:, None]
    ab = torch.tensor(np.stack(abs_), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()
    return L, ab


def load_labeled_stack(ds: PairedDataset, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    Ls = [split_luminance(rgb_to_lab(read_rgb(s.color, size)))[0] for s in ds.samples]
    labels = torch.tensor([s.label for s in ds.samples], dtype=torch.long)
    return torch.tensor(np.stack(Ls), dtype=torch.float32)[:, None], labels
