"""Run configuration: flat ``key=value`` files plus presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Optional

from ..network import NetworkConfig, desk_config, reference_config

SCALES = ("desk", "reference")

# Values that depend on the scale preset when left unset.
_SCALE_DEFAULTS = {
    "desk": {"rho": 2, "epochs_class": 20, "epochs_e2e": 16, "epochs_gan": 20, "batch_size": 4},
    "reference": {"rho": 30, "epochs_class": 20, "epochs_e2e": 240, "epochs_gan": 1000, "batch_size": 16},
}


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scale: str = "desk"
    seed: int = 0
    rho: Optional[int] = None
    epochs_class: Optional[int] = None
    epochs_e2e: Optional[int] = None
    epochs_gan: Optional[int] = None
    batch_size: Optional[int] = None
    lr: float = 2e-3
    use_capsules: bool = True
    use_classifier: bool = True
    use_progl: bool = True
    use_gan: bool = True
    gan_e2e_terms: bool = False
    weight_q: float = 1.0
    weight_ch: float = 1.0
    weight_adv: float = 1.0
    weight_perc: float = 1.0
    bin_size: float = 10.0
    soft_k: int = 5
    soft_sigma: float = 5.0
    rebalance_lambda: float = 0.5
    lum_bits: int = 8

    def __post_init__(self):
        if self.scale not in SCALES:
            raise RunConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        for key, val in _SCALE_DEFAULTS[self.scale].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, val)
        for key in ("rho", "batch_size", "soft_k"):
            if getattr(self, key) < 1:
                raise RunConfigError(f"{key} must be >= 1")
        for key in ("epochs_class", "epochs_e2e", "epochs_gan"):
            if getattr(self, key) < 0:
                raise RunConfigError(f"{key} must be >= 0")
        if self.lr <= 0 or self.bin_size <= 0 or self.soft_sigma <= 0:
            raise RunConfigError("lr, bin_size and soft_sigma must be positive")
        if not 0.0 <= self.rebalance_lambda <= 1.0:
            raise RunConfigError("rebalance_lambda must lie in [0, 1]")
        if self.lum_bits not in (8, 16):
            raise RunConfigError("lum_bits must be 8 or 16")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def network(self, Q: int) -> NetworkConfig:
        base = desk_config(Q) if self.scale == "desk" else reference_config(Q)
        return base.replace(
            use_capsules=self.use_capsules,
            use_classifier=self.use_classifier,
            use_progl=self.use_progl,
            use_gan=self.use_gan,
        )

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise RunConfigError(f"unknown config keys: {', '.join(unknown)}")
        parsed = {}
        for key, raw in values.items():
            parsed[key] = _coerce(key, raw, cls.__dataclass_fields__[key].default)
        return cls(**parsed)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise RunConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if key == "scale":
            return text
        if isinstance(default, float):
            return float(text)
        return int(text)
    except ValueError:
        raise RunConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunConfigError(f"line {n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise RunConfigError(f"line {n}: duplicate key {key!r}")
        values[key] = val
    return values


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_mapping(parse_config_text(fh.read()))
