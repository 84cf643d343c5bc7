"""Convolutional building blocks of the colourisation network.

Tensors are NCHW.  Every block checks the channel count (and, where it
matters, the spatial size) of its input and raises :class:`ShapeError`
on a mismatch.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IN_EPS = 1e-5


class ShapeError(ValueError):
    """A tensor does not satisfy a block's shape contract."""


def _check_channels(x: torch.Tensor, expected: int, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ShapeError(f"{who}: expected N x {expected} x H x W, got {tuple(x.shape)}")


def as_float_tensor(x) -> torch.Tensor:
    """Fresh float32 copy of an array or tensor."""
    if isinstance(x, torch.Tensor):
        return x.detach().to(torch.float32).clone()
    return torch.from_numpy(np.array(x, dtype=np.float32))


def resize_nearest(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-2:] == (size, size):
        return x
    return F.interpolate(x, size=(size, size), mode="nearest")


class ConvINReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, kernel: int = 3):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=kernel // 2),
            nn.InstanceNorm2d(out_channels, eps=IN_EPS, affine=True),
            nn.ReLU(),
        )


class PreBlock(nn.Module):
    """Conv-IN-ReLU-MaxPool; reduces the spatial size by 4."""

    def __init__(self, in_channels: int = 1, out_channels: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.body = ConvINReLU(in_channels, out_channels, stride=2)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        _check_channels(x, self.in_channels, "PreB")
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"PreB: spatial size {tuple(x.shape[-2:])} not divisible by 4")
        return self.pool(self.body(x))


class DownBlock(nn.Module):
    """Two Conv-IN-ReLU sequences; the first carries the stride."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.body = nn.Sequential(
            ConvINReLU(in_channels, out_channels, stride=stride),
            ConvINReLU(out_channels, out_channels),
        )

    def forward(self, x):
        _check_channels(x, self.in_channels, "DBD")
        return self.body(x)


class UpBlock(nn.Module):
    """Nearest resize to ``size`` followed by two Conv-IN-ReLU sequences.

    ``skip_channels`` > 0 means the block expects an encoder tensor, which
    is resized to the spatial size of the decoder input and concatenated
    with it before upsampling.
    """

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, size: int):
        super().__init__()
        self.in_channels = in_channels
        self.skip_channels = skip_channels
        self.out_channels = out_channels
        self.size = size
        self.body = nn.Sequential(
            ConvINReLU(in_channels + skip_channels, out_channels),
            ConvINReLU(out_channels, out_channels),
        )

    def forward(self, x, skip: Optional[torch.Tensor] = None):
        _check_channels(x, self.in_channels, "DBU")
        if self.skip_channels:
            if skip is None:
                raise ShapeError("DBU: block was configured with a skip connection but none was given")
            _check_channels(skip, self.skip_channels, "DBU skip")
            skip = resize_nearest(skip, x.shape[-1])
            if skip.shape[-2:] != x.shape[-2:] or skip.shape[0] != x.shape[0]:
                raise ShapeError(f"DBU: skip {tuple(skip.shape)} incompatible with {tuple(x.shape)}")
            x = torch.cat([x, skip], dim=1)
        elif skip is not None:
            raise ShapeError("DBU: block takes no skip connection")
        return self.body(resize_nearest(x, self.size))


class PostBlock(nn.Module):
    """Upsample-Conv-IN-ReLU back to the resolution of the PreB output."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, size: int):
        super().__init__()
        self.in_channels = in_channels
        self.skip_channels = skip_channels
        self.out_channels = out_channels
        self.size = size
        self.body = ConvINReLU(in_channels + skip_channels, out_channels)

    def forward(self, y, skip):
        _check_channels(y, self.in_channels, "PostB")
        _check_channels(skip, self.skip_channels, "PostB skip")
        x = torch.cat([y, resize_nearest(skip, y.shape[-1])], dim=1)
        return self.body(resize_nearest(x, self.size))


class ColorQuantizationHead(nn.Module):
    """Quantization layer (1x1 conv to Q logits) plus chroma layer.

    The chroma layer is a 1x1 conv over the softmaxed logits, initialised
    so that it returns the probability-weighted mean of the bin centres.
    With ``residual=True`` the input is summed with the PreB output
    first (final head); ``upscale`` bilinearly resizes the chroma map.
    """

    def __init__(self, in_channels: int, centers, residual: bool = False, upscale: int = 1):
        super().__init__()
        centers = as_float_tensor(centers)
        self.in_channels = in_channels
        self.Q = centers.shape[0]
        self.residual = residual
        self.upscale = upscale
        self.quantize = nn.Conv2d(in_channels, self.Q, 1)
        self.chroma = nn.Conv2d(self.Q, 2, 1)
        with torch.no_grad():
            self.chroma.weight.copy_(centers.t().reshape(2, self.Q, 1, 1))
            self.chroma.bias.zero_()

    def forward(self, x, omega: Optional[torch.Tensor] = None):
        _check_channels(x, self.in_channels, "CQB")
        if self.residual:
            if omega is None or omega.shape != x.shape:
                got = None if omega is None else tuple(omega.shape)
                raise ShapeError(f"CQB: residual needs a tensor of shape {tuple(x.shape)}, got {got}")
            x = x + omega
        elif omega is not None:
            raise ShapeError("TCQB: no residual input expected")
        logits = self.quantize(x)
        ab = self.chroma(torch.softmax(logits, dim=1))
        if self.upscale != 1:
            ab = F.interpolate(ab, scale_factor=self.upscale, mode="bilinear", align_corners=False)
        return logits, ab


class PatchDiscriminator(nn.Module):
    """Pix2Pix-style patch classifier over ``cat(L, ab)``.

    With ``n_layers=3`` every output logit sees a 70x70 input patch.
    ``ab`` is divided by ``ab_scale`` so that all three input channels are
    of order one.
    """

    def __init__(self, base_channels: int = 64, n_layers: int = 3, ab_scale: float = 110.0):
        super().__init__()
        self.ab_scale = ab_scale
        layers: list[nn.Module] = [nn.Conv2d(3, base_channels, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = base_channels
        for n in range(1, n_layers):
            nxt = base_channels * min(2**n, 8)
            layers += [
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt, eps=IN_EPS, affine=True),
                nn.LeakyReLU(0.2),
            ]
            ch = nxt
        nxt = base_channels * min(2**n_layers, 8)
        layers += [
            nn.Conv2d(ch, nxt, 4, stride=1, padding=1),
            nn.InstanceNorm2d(nxt, eps=IN_EPS, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(nxt, 1, 4, stride=1, padding=1),
        ]
        self.model = nn.Sequential(*layers)
        self.n_layers = n_layers

    def forward(self, L, ab):
        if L.shape[-2:] != ab.shape[-2:]:
            raise ShapeError(f"discriminator: L {tuple(L.shape)} and ab {tuple(ab.shape)} differ spatially")
        _check_channels(L, 1, "discriminator L")
        _check_channels(ab, 2, "discriminator ab")
        return self.model(torch.cat([L, ab / self.ab_scale], dim=1))


def patch_output_size(size: int, n_layers: int = 3) -> int:
    """Spatial size of the logit map for a ``size`` x ``size`` input."""
    for _ in range(n_layers):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = size + 2 - 4 + 1
    return size


def receptive_field(n_layers: int = 3) -> int:
    # Walk back from one output unit: k=4 everywhere, strides known.
    strides: Sequence[int] = [2] * n_layers + [1, 1]
    rf = 1
    for s in reversed(strides):
        rf = (rf - 1) * s + 4
    return rf
