"""Loss functions for the three training phases."""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


def loss_class(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def loss_q(logits: torch.Tensor, target: torch.Tensor, rarity: torch.Tensor, tol: float = 1e-4) -> torch.Tensor:
    """Rarity-weighted cross-entropy between soft-encoded targets and logits.

    ``logits`` and ``target`` are ``N x Q x H x W``; each pixel is weighted
    by the rarity of its target's dominant bin.  Mean over pixels.
    """
    if logits.shape != target.shape:
        raise ValueError(f"loss_q: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    row_sums = target.sum(dim=1)
    if torch.any((row_sums - 1).abs() > tol):
        raise ValueError("loss_q: target distributions must sum to 1")
    per_pixel = -(target * F.log_softmax(logits, dim=1)).sum(dim=1)
    v = rarity[target.argmax(dim=1)]
    return (v * per_pixel).mean()


def loss_ch(ab_hat: torch.Tensor, ab: torch.Tensor) -> torch.Tensor:
    """Squared chroma error summed over (a, b), mean over pixels."""
    if ab_hat.shape != ab.shape:
        raise ValueError(f"loss_ch: {tuple(ab_hat.shape)} vs {tuple(ab.shape)}")
    return ((ab_hat - ab) ** 2).sum(dim=1).mean()


def loss_adv(logits: torch.Tensor, target_is_real: bool) -> torch.Tensor:
    target = torch.ones_like(logits) if target_is_real else torch.zeros_like(logits)
    return F.binary_cross_entropy_with_logits(logits, target)


class PerceptualExtractor(nn.Module):
    """Fixed feature network whose tapped layer outputs feed ``loss_perc``.

    The default is a randomly initialised stack of dilated 3x3 convs with
    dilations 1, 2, 4, 8, seeded for reproducibility and never trained.
    ``layers`` may be given explicitly to plug in another extractor;
    every layer's output is tapped.
    """

    def __init__(self, in_channels: int = 0, channels: int = 16, dilations=(1, 2, 4, 8),
                 seed: int = 0, layers: Sequence[Callable] | None = None):
        super().__init__()
        if layers is None:
            gen = torch.Generator().manual_seed(seed)
            built = []
            prev = in_channels
            for d in dilations:
                conv = nn.Conv2d(prev, channels, 3, padding=d, dilation=d)
                with torch.no_grad():
                    bound = 1.0 / (prev * 9) ** 0.5
                    conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                    conv.bias.copy_((torch.rand(conv.bias.shape, generator=gen) * 2 - 1) * bound)
                built.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
                prev = channels
            self.layers = nn.ModuleList(built)
        else:
            self.layers = list(layers)  # type: ignore[assignment]
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


def loss_perc(pred: torch.Tensor, target: torch.Tensor, extractor) -> torch.Tensor:
    """Mean over tapped layers of the per-layer mean squared feature gap."""
    fp = extractor(pred)
    ft = extractor(target)
    per_layer = [((a - b) ** 2).mean() for a, b in zip(ft, fp)]
    return torch.stack(per_layer).mean()
