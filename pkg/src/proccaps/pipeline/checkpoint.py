"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"UWPC" | version | 32-byte config digest | phase (len + utf-8)
    | n_blobs | n_blobs x [name (len + utf-8) | ndim | dims... | float32 data]
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..blocks import PatchDiscriminator
from ..network import Colorizer, NetworkConfig, build_discriminator

MAGIC = b"UWPC"
VERSION = 1
PHASES = ("classifier", "end2end", "gan")


class CheckpointError(RuntimeError):
    pass


class CheckpointFormatError(CheckpointError):
    """The file is truncated, malformed, or lacks expected tensors."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """The checkpoint was written for an incompatible network configuration."""


@dataclass
class ModelState:
    generator: Colorizer
    discriminator: Optional[PatchDiscriminator] = None
    phase: str = "end2end"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")

    @property
    def cfg(self) -> NetworkConfig:
        return self.generator.cfg

    def tensors(self) -> dict:
        out = {"generator." + k: v for k, v in self.generator.state_dict().items()}
        if self.discriminator is not None:
            out.update({"discriminator." + k: v for k, v in self.discriminator.state_dict().items()})
        return out


def new_state(cfg: NetworkConfig, centers, rarity=None, phase: str = "end2end") -> ModelState:
    gen = Colorizer(cfg, centers, rarity)
    disc = build_discriminator(cfg) if cfg.use_gan else None
    return ModelState(gen, disc, phase)


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def encode_checkpoint(tensors: dict, digest: bytes, phase: str) -> bytes:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    out = io.BytesIO()
    out.write(MAGIC + _u32(VERSION) + digest + _str(phase) + _u32(len(tensors)))
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        out.write(_str(name) + _u32(arr.ndim))
        for d in arr.shape:
            out.write(_u32(d))
        out.write(np.ascontiguousarray(arr).tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"bad string in checkpoint: {exc}") from None


def decode_checkpoint(data: bytes) -> tuple[bytes, str, dict]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    digest = r.take(32)
    phase = r.str()
    tensors = {}
    for _ in range(r.u32()):
        name = r.str()
        dims = [r.u32() for _ in range(r.u32())]
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(data):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return digest, phase, tensors


def config_digest(cfg: NetworkConfig) -> bytes:
    return hashlib.sha256(cfg.digest().encode()).digest()


def save_checkpoint(state: ModelState, path) -> None:
    data = encode_checkpoint(state.tensors(), config_digest(state.cfg), state.phase)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path, cfg: NetworkConfig) -> ModelState:
    """Rebuild a :class:`ModelState` for ``cfg`` from ``path``.

    Raises :class:`CheckpointMismatchError` if it was written for another
    configuration and :class:`CheckpointFormatError` if tensors are missing.
    """
    with open(path, "rb") as fh:
        digest, phase, tensors = decode_checkpoint(fh.read())
    if digest != config_digest(cfg):
        raise CheckpointMismatchError(f"{path} was written for a different network configuration")
    if phase not in PHASES:
        raise CheckpointFormatError(f"unknown phase tag {phase!r}")
    centers = tensors.get("generator.bin_centers")
    if centers is None:
        raise CheckpointFormatError("checkpoint lacks generator.bin_centers")
    state = new_state(cfg, centers, phase=phase)
    expected = state.tensors()
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointFormatError(f"tensor inventory mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in expected.items():
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise CheckpointFormatError(f"{name}: shape {tuple(tensors[name].shape)} != {tuple(t.shape)}")
    gen = {k[len("generator."):]: v for k, v in tensors.items() if k.startswith("generator.")}
    state.generator.load_state_dict(gen)
    if state.discriminator is not None:
        disc = {k[len("discriminator."):]: v for k, v in tensors.items() if k.startswith("discriminator.")}
        state.discriminator.load_state_dict(disc)
    return state
