"""Capsule encoder (primary capsules, affine predictions, dynamic routing)
and the reversed capsule decoder.

Layouts used throughout:

* ``U``      -- ``(B, C, h, w, k)``: input capsule ``i`` is ``U[:, i]``
  flattened over ``(h, w, k)``.
* ``U_hat``  -- ``(B, C, J, h, w, kv)``: prediction of input ``i`` for
  output ``j``.
* ``V``      -- ``(B, J, h, w, kv)``.
* couplings  -- ``(B, C, J)``; rows sum to one over ``J``.

The affine maps act on the per-position channel vector and are shared
across the ``h x w`` positions of a capsule pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .blocks import ShapeError


def squash(s: torch.Tensor, dims=(-1,)) -> torch.Tensor:
    """Scale ``s`` to norm ``|s|^2 / (1 + |s|^2)`` along ``dims``; zero stays zero."""
    n2 = (s * s).sum(dim=dims, keepdim=True)
    nonzero = n2 > 0
    n = torch.sqrt(torch.where(nonzero, n2, torch.ones_like(n2)))
    scale = torch.where(nonzero, n / (1.0 + n2), torch.zeros_like(n2))
    return s * scale


@dataclass
class RoutingState:
    logits: torch.Tensor
    couplings: torch.Tensor
    iterations: int
    history: list = field(default_factory=list)


def route(u_hat: torch.Tensor, iterations: int = 3) -> tuple[torch.Tensor, RoutingState]:
    """Routing by agreement over ``u_hat`` of shape ``(B, C, J, *pose)``.

    Returns ``V`` of shape ``(B, J, *pose)``; each ``V[:, j]`` is squashed
    as one flat vector.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    B, C, J = u_hat.shape[:3]
    pose_dims = tuple(range(2, u_hat.dim() - 1))  # dims of V excluding batch and J
    extra = (1,) * (u_hat.dim() - 3)
    b = u_hat.new_zeros(B, C, J)
    history = []
    for it in range(iterations):
        c = torch.softmax(b, dim=2)
        history.append(c)
        s = (c.view(B, C, J, *extra) * u_hat).sum(dim=1)
        v = squash(s, dims=pose_dims)
        if it + 1 < iterations:
            agreement = (u_hat * v.unsqueeze(1)).flatten(3).sum(dim=3)
            b = b + agreement
    return v, RoutingState(logits=b, couplings=c, iterations=iterations, history=history)


class PrimaryCapsules(nn.Module):
    """``n_capsules`` independent 3x3 convolutions over the bottleneck tensor."""

    def __init__(self, in_channels: int, n_capsules: int, capsule_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.n_capsules = n_capsules
        self.capsule_channels = capsule_channels
        # One wide conv equals C independent convs with disjoint output groups.
        self.conv = nn.Conv2d(in_channels, n_capsules * capsule_channels, 3, padding=1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"primary capsules: expected {self.in_channels} channels, got {tuple(x.shape)}")
        B, _, h, w = x.shape
        u = self.conv(x).view(B, self.n_capsules, self.capsule_channels, h, w)
        return u.permute(0, 1, 3, 4, 2)


class CapsuleLayer(nn.Module):
    """Affine predictions ``u_hat_{j|i} = W_ij u_i`` followed by routing."""

    def __init__(self, n_in: int, n_out: int, in_channels: int, out_channels: int, iterations: int = 3):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.in_channels, self.out_channels = in_channels, out_channels
        self.iterations = iterations
        self.weight = nn.Parameter(torch.randn(n_in, n_out, out_channels, in_channels) / math.sqrt(in_channels))

    def predict(self, u):
        if u.shape[1] != self.n_in or u.shape[-1] != self.in_channels:
            raise ShapeError(f"capsule predictions: bad input {tuple(u.shape)}")
        return torch.einsum("ijvk,bihwk->bijhwv", self.weight, u)

    def forward(self, u):
        return route(self.predict(u), self.iterations)


class ReversePredict(nn.Module):
    """``u^r_{i|j} = W^r_ji v_j``, aggregated over ``j`` with the couplings."""

    def __init__(self, n_in: int, n_out: int, in_channels: int, out_channels: int):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.in_channels, self.out_channels = in_channels, out_channels
        self.weight = nn.Parameter(torch.randn(n_out, n_in, in_channels, out_channels) / math.sqrt(out_channels))

    def forward(self, v, couplings):
        if v.shape[1] != self.n_out or v.shape[-1] != self.out_channels:
            raise ShapeError(f"reverse prediction: bad pose tensor {tuple(v.shape)}")
        if couplings.shape[1:] != (self.n_in, self.n_out):
            raise ShapeError(f"reverse prediction: bad couplings {tuple(couplings.shape)}")
        u_rev = torch.einsum("jikv,bjhwv->bijhwk", self.weight, v)
        return (couplings[:, :, :, None, None, None] * u_rev).sum(dim=2)


class CapsuleDecoder(nn.Module):
    """One transpose convolution per capsule; outputs concatenated on channels."""

    def __init__(self, n_capsules: int, in_channels: int, out_channels: int,
                 kernel: int = 3, stride: int = 2, padding: int = 0):
        super().__init__()
        self.n_capsules = n_capsules
        self.in_channels = in_channels
        self.out_channels = out_channels
        # groups=C keeps the per-capsule transpose convs independent.
        self.tconv = nn.ConvTranspose2d(
            n_capsules * in_channels, n_capsules * out_channels, kernel,
            stride=stride, padding=padding, groups=n_capsules,
        )

    def forward(self, u_rev):
        B, C, h, w, k = u_rev.shape
        if C != self.n_capsules or k != self.in_channels:
            raise ShapeError(f"capsule decoder: bad input {tuple(u_rev.shape)}")
        x = u_rev.permute(0, 1, 4, 2, 3).reshape(B, C * k, h, w)
        return self.tconv(x)


class CapsuleBottleneck(nn.Module):
    """Primary capsules -> routing -> reverse affine -> per-capsule TConv."""

    def __init__(self, in_channels: int, n_capsules: int, capsule_channels: int,
                 n_out: int, pose_channels: int, decoder_channels: int,
                 iterations: int = 3, tconv=(3, 2, 0)):
        super().__init__()
        self.primary = PrimaryCapsules(in_channels, n_capsules, capsule_channels)
        self.encode = CapsuleLayer(n_capsules, n_out, capsule_channels, pose_channels, iterations)
        self.reverse = ReversePredict(n_capsules, n_out, capsule_channels, pose_channels)
        self.decode = CapsuleDecoder(n_capsules, capsule_channels, decoder_channels, *tconv)
        self.out_channels = n_capsules * decoder_channels

    def forward(self, upsilon):
        u = self.primary(upsilon)
        v, state = self.encode(u)
        x = self.decode(self.reverse(v, state.couplings))
        return x, v, state
