"""PSNR / SSIM on RGB composites and dataset-level reports."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.signal import convolve2d

from .colorspace import lab_to_rgb, merge_luminance, rgb_to_lab, split_luminance

PSNR_CAP = 100.0


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``PSNR_CAP``."""
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(x, y, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained windows and all channels.

    Images are ``H x W`` or ``H x W x C`` with values on a ``data_range`` scale.
    """
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < win_size:
        raise ValueError(f"image {x.shape[:2]} smaller than the {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)
    w = np.outer(g, g)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(img):
        return convolve2d(img, w, mode="valid")

    scores = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], y[..., ch]
        mu_a, mu_b = filt(a), filt(b)
        var_a = filt(a * a) - mu_a * mu_a
        var_b = filt(b * b) - mu_b * mu_b
        cov = filt(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    model_id: str = ""

    def add(self, name: str, p: float, s: float):
        self.names.append(name)
        self.psnr.append(p)
        self.ssim.append(s)

    def __len__(self):
        return len(self.names)

    def summary(self) -> dict:
        p, s = np.asarray(self.psnr), np.asarray(self.ssim)
        return {"psnr_mean": float(p.mean()), "psnr_std": float(p.std()),
                "ssim_mean": float(s.mean()), "ssim_std": float(s.std())}

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("image,psnr,ssim\n")
        for n, p, s in zip(self.names, self.psnr, self.ssim):
            out.write(f"{n},{p:.6f},{s:.6f}\n")
        out.write("\n")
        if self.model_id:
            out.write(f"# model,{self.model_id}\n")
        for key, val in self.summary().items():
            out.write(f"# {key},{val:.6f}\n")
        return out.getvalue()

    @staticmethod
    def rows_from_csv(text: str) -> list[tuple[str, float, float]]:
        lines = text.splitlines()
        if not lines or lines[0] != "image,psnr,ssim":
            raise ValueError("not a metric report")
        rows = []
        for ln in lines[1:]:
            if not ln or ln.startswith("#"):
                break
            name, p, s = ln.rsplit(",", 2)
            rows.append((name, float(p), float(s)))
        return rows


def composite(L_plane, ab) -> np.ndarray:
    """RGB render of the input luminance with a predicted chroma map."""
    return lab_to_rgb(merge_luminance(L_plane, ab))


def evaluate_dataset(colorize: Callable[[np.ndarray], np.ndarray],
                     images: Iterable[tuple[str, np.ndarray]], model_id: str = "") -> MetricReport:
    """Score ``colorize`` (``L plane -> ab``) on ``(name, rgb)`` pairs.

    Both the prediction and the reference are rendered from the same
    luminance, so a model returning the true chroma scores perfectly.
    """
    report = MetricReport(model_id=model_id)
    for name, rgb in images:
        L_plane, ab_true = split_luminance(rgb_to_lab(rgb))
        ab_pred = np.asarray(colorize(L_plane), dtype=np.float64)
        pred = composite(L_plane, ab_pred)
        ref = composite(L_plane, ab_true)
        report.add(name, psnr(pred, ref), ssim(pred, ref))
    if len(report) == 0:
        raise ValueError("evaluate_dataset needs at least one image")
    return report


def zero_chroma(L_plane: np.ndarray) -> np.ndarray:
    return np.zeros(np.shape(L_plane) + (2,))


def model_colorizer(model) -> Callable[[np.ndarray], np.ndarray]:
    """Adapt a :class:`~proccaps.network.Colorizer` to ``L plane -> ab``."""
    import torch

    def run(L_plane: np.ndarray) -> np.ndarray:
        L = torch.tensor(L_plane, dtype=torch.float32)[None, None]
        model.eval()
        with torch.no_grad():
            ab = model(L).ab[0]
        return ab.permute(1, 2, 0).double().numpy()

    return run

