"""Network configuration, shape algebra and the assembled colouriser."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .blocks import (
    ColorQuantizationHead,
    ConvINReLU,
    DownBlock,
    PatchDiscriminator,
    PostBlock,
    PreBlock,
    ShapeError,
    UpBlock,
    as_float_tensor,
    patch_output_size,
)
from .capsules import CapsuleBottleneck

log = logging.getLogger(__name__)

STAGES = ("CD", "DBU1", "DBU2", "DBU3", "DBU4", "PostB")
FINAL_STAGE = len(STAGES) - 1

# Shapes stated for the reference model (H, W, C); capsules as (caps, H, W, C).
PAPER_SHAPES = {
    "Omega": (56, 56, 32),
    "D1": (16, 16, 512),
    "Upsilon": (16, 16, 519),
    "V": (32, 8, 8, 128),
    "X": (15, 15),
    "Y1": (16, 16),
    "Y2": (20, 20),
    "Y3": (24, 24),
    "Y4": (28, 28),
    "Z_hat": (56, 56, 313),
    "ab_hat": (224, 224, 2),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 32
    preb_channels: int = 32
    encoder_channels: tuple = (64, 64, 64, 64)
    encoder_strides: tuple = (2, 2, 1, 1)
    n_classes: int = 7
    classifier_channels: tuple = (16, 32, 32, 64)
    n_capsules: int = 4
    capsule_channels: int = 8
    n_out_capsules: int = 4
    pose_channels: int = 8
    routing_iterations: int = 3
    capsule_decoder_channels: int = 4
    tconv: tuple = (3, 2, 0)  # kernel, stride, padding
    decoder_channels: tuple = (32, 32, 32, 32)
    decoder_sizes: tuple = (5, 6, 7, 8)
    Q: int = 261
    disc_channels: int = 16
    disc_layers: int = 3
    use_capsules: bool = True
    use_classifier: bool = True
    use_progl: bool = True
    use_gan: bool = True

    def __post_init__(self):
        for name in ("encoder_channels", "encoder_strides", "classifier_channels",
                     "tconv", "decoder_channels", "decoder_sizes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        validate(self)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def reference_config(Q: int) -> NetworkConfig:
    return NetworkConfig(
        input_size=224,
        preb_channels=32,
        encoder_channels=(64, 128, 256, 512),
        encoder_strides=(2, 2, 2, 1),
        n_classes=7,
        classifier_channels=(32, 64, 128, 256),
        n_capsules=32,
        capsule_channels=16,
        n_out_capsules=32,
        pose_channels=128,
        capsule_decoder_channels=8,
        tconv=(3, 2, 0),
        decoder_channels=(256, 128, 64, 32),
        decoder_sizes=(16, 20, 24, 28),
        Q=Q,
        disc_channels=64,
        disc_layers=3,
    )


def desk_config(Q: int) -> NetworkConfig:
    return NetworkConfig(Q=Q)


def _conv_out(size: int, stride: int) -> int:
    return (size + 2 - 3) // stride + 1


def shape_plan(cfg: NetworkConfig) -> dict:
    """Every intermediate tensor shape, as ``name -> (H, W, C)``.

    Capsule tensors use ``(caps, H, W, C)``.  Does not validate.
    """
    s = cfg.input_size // 4
    plan = {"I_L": (cfg.input_size, cfg.input_size, 1), "Omega": (s, s, cfg.preb_channels)}
    sizes = []
    for n, (ch, st) in enumerate(zip(cfg.encoder_channels, cfg.encoder_strides)):
        s = _conv_out(s, st)
        sizes.append(s)
        plan[f"D{4 - n}"] = (s, s, ch)
    d1 = plan["D1"]
    up_ch = d1[2] + (cfg.n_classes if cfg.use_classifier else 0)
    plan["Upsilon"] = (d1[0], d1[1], up_ch)
    if cfg.use_capsules:
        h = d1[0]
        k, st, p = cfg.tconv
        x = (h - 1) * st - 2 * p + k
        plan["U"] = (cfg.n_capsules, h, h, cfg.capsule_channels)
        plan["V"] = (cfg.n_out_capsules, h, h, cfg.pose_channels)
        plan["X"] = (x, x, cfg.n_capsules * cfg.capsule_decoder_channels)
    else:
        plan["X"] = (d1[0], d1[1], cfg.decoder_channels[0])
    for m, (ch, sz) in enumerate(zip(cfg.decoder_channels, cfg.decoder_sizes), start=1):
        plan[f"Y{m}"] = (sz, sz, ch)
    om = plan["Omega"]
    plan["Psi"] = (om[0], om[1], cfg.preb_channels)
    plan["Z_hat"] = (om[0], om[1], cfg.Q)
    plan["ab_hat"] = (cfg.input_size, cfg.input_size, 2)
    plan["disc_logits"] = (patch_output_size(cfg.input_size, cfg.disc_layers),) * 2 + (1,)
    return plan


def validate(cfg: NetworkConfig) -> None:
    """Reject configurations whose shape algebra is inconsistent."""

    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    positive = ("input_size", "preb_channels", "n_classes", "n_capsules", "capsule_channels",
                "n_out_capsules", "pose_channels", "routing_iterations",
                "capsule_decoder_channels", "Q", "disc_channels", "disc_layers")
    for name in positive:
        need(getattr(cfg, name) >= 1, f"{name} must be >= 1")
    need(cfg.input_size % 4 == 0, "input_size must be divisible by 4")
    for name in ("encoder_channels", "encoder_strides", "decoder_channels", "decoder_sizes"):
        need(len(getattr(cfg, name)) == 4, f"{name} needs exactly 4 entries")
    need(len(cfg.classifier_channels) >= 1 and min(cfg.classifier_channels) >= 1,
         "classifier_channels must be positive")
    need(min(cfg.encoder_channels) >= 1 and min(cfg.decoder_channels) >= 1, "channel counts must be positive")
    need(all(s in (1, 2) for s in cfg.encoder_strides), "encoder strides must be 1 or 2")
    need(len(cfg.tconv) == 3 and cfg.tconv[0] >= 1 and cfg.tconv[1] >= 1 and cfg.tconv[2] >= 0,
         "tconv must be (kernel>=1, stride>=1, padding>=0)")
    plan = shape_plan(cfg)
    d1 = plan["D1"][0]
    need(d1 >= 2, f"encoder bottleneck collapses to {d1}x{d1}; instance norm needs >= 2x2")
    x = plan["X"][0]
    need(x >= 1, "capsule decoder output is empty")
    sizes = cfg.decoder_sizes
    need(sizes[0] >= x, f"decoder ladder must start at or above the capsule-decoder size {x}")
    need(all(a <= b for a, b in zip(sizes, sizes[1:])), "decoder ladder must be non-decreasing")
    omega = plan["Omega"][0]
    need(sizes[-1] <= omega, f"decoder ladder must end at or below the PreB resolution {omega}")
    need(plan["disc_logits"][0] >= 1, "discriminator collapses the input; reduce disc_layers")


def paper_departures(cfg: NetworkConfig) -> list[tuple[str, tuple, tuple]]:
    """``(name, paper shape, built shape)`` for every stated shape we do not reproduce."""
    plan = shape_plan(cfg)
    out = []
    for name, stated in PAPER_SHAPES.items():
        built = plan.get(name)
        if built is None:
            continue
        built = tuple(built[: len(stated)])
        if built != stated:
            out.append((name, stated, built))
    return out


class Classifier(nn.Module):
    """Small image classifier over the luminance replicated to three channels."""

    def __init__(self, n_classes: int, channels=(16, 32, 32, 64)):
        super().__init__()
        layers = []
        prev = 3
        for ch in channels:
            layers += [ConvINReLU(prev, ch), nn.MaxPool2d(2)]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, n_classes)
        self.n_classes = n_classes
        self.frozen = False

    def forward(self, L):
        x = self.features(L.expand(-1, 3, -1, -1))
        return self.head(x.mean(dim=(2, 3)))

    def freeze(self) -> "Classifier":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def train(self, mode: bool = True):
        # A frozen classifier never leaves eval mode.
        return super().train(mode and not self.frozen)


@dataclass
class ForwardResult:
    logits: torch.Tensor
    ab: torch.Tensor
    extras: dict = field(default_factory=dict)


class Colorizer(nn.Module):
    """Encoder, classifier branch, capsule bottleneck, decoder and heads.

    ``forward(L, stage)`` runs the network grown up to ``stage`` (an index
    into :data:`STAGES`) and returns that stage's head outputs: a
    temporary head for stages before ``PostB``, the final head otherwise.
    """

    def __init__(self, cfg: NetworkConfig, centers, rarity=None):
        super().__init__()
        centers = as_float_tensor(centers)
        if centers.shape != (cfg.Q, 2):
            raise ConfigError(f"gamut has {centers.shape[0]} bins but config declares Q={cfg.Q}")
        self.cfg = cfg
        plan = shape_plan(cfg)
        self.plan = plan
        level = logging.INFO if cfg.input_size == 224 else logging.DEBUG
        for name, stated, built in paper_departures(cfg):
            log.log(level, "shape departure: %s stated %s built %s", name, stated, built)

        self.register_buffer("bin_centers", centers.clone())
        rarity = torch.ones(cfg.Q) if rarity is None else as_float_tensor(rarity)
        self.register_buffer("rarity", rarity.clone())

        self.classifier = Classifier(cfg.n_classes, cfg.classifier_channels).freeze() if cfg.use_classifier else None
        self.preb = PreBlock(1, cfg.preb_channels)
        chans = (cfg.preb_channels,) + cfg.encoder_channels
        self.encoder = nn.ModuleList(
            DownBlock(chans[n], chans[n + 1], cfg.encoder_strides[n]) for n in range(4)
        )
        up_ch = plan["Upsilon"][2]
        if cfg.use_capsules:
            self.capsules = CapsuleBottleneck(
                up_ch, cfg.n_capsules, cfg.capsule_channels, cfg.n_out_capsules,
                cfg.pose_channels, cfg.capsule_decoder_channels, cfg.routing_iterations, cfg.tconv,
            )
            self.adapter = None
        else:
            self.capsules = None
            self.adapter = nn.Conv2d(up_ch, plan["X"][2], 1)
        x_ch = plan["X"][2]
        # DBU^1 takes X alone; DBU^m pairs with D^(m-1).
        skip_ch = (0,) + tuple(cfg.encoder_channels[::-1][:3])
        in_ch = (x_ch,) + cfg.decoder_channels[:3]
        self.decoder = nn.ModuleList(
            UpBlock(in_ch[m], skip_ch[m], cfg.decoder_channels[m], cfg.decoder_sizes[m]) for m in range(4)
        )
        self.postb = PostBlock(cfg.decoder_channels[3], cfg.encoder_channels[0], cfg.preb_channels, plan["Omega"][0])
        self.head = ColorQuantizationHead(cfg.preb_channels, centers, residual=True, upscale=4)
        if cfg.use_progl:
            head_in = (x_ch,) + cfg.decoder_channels
            self.temp_heads = nn.ModuleList(ColorQuantizationHead(c, centers) for c in head_in)
        else:
            self.temp_heads = None

    def head_resolution(self, stage: int) -> int:
        if stage == FINAL_STAGE:
            return self.plan["Omega"][0]
        return self.plan["X"][0] if stage == 0 else self.cfg.decoder_sizes[stage - 1]

    def classify(self, L):
        return self.classifier(L)

    def encode(self, L):
        """Returns ``(Upsilon, [D4, D3, D2, D1], Omega)``."""
        if L.dim() != 4 or L.shape[1] != 1 or L.shape[-1] != self.cfg.input_size:
            raise ShapeError(f"expected N x 1 x {self.cfg.input_size} x {self.cfg.input_size} input, got {tuple(L.shape)}")
        omega = self.preb(L)
        skips = []
        x = omega
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        d1 = skips[-1]
        if self.classifier is not None:
            probs = torch.softmax(self.classifier(L), dim=1)
            grid = probs[:, :, None, None].expand(-1, -1, d1.shape[2], d1.shape[3])
            upsilon = torch.cat([d1, grid], dim=1)
        else:
            upsilon = d1
        return upsilon, skips, omega

    def forward(self, L, stage: int = FINAL_STAGE) -> ForwardResult:
        if not 0 <= stage <= FINAL_STAGE:
            raise ValueError(f"stage must lie in [0, {FINAL_STAGE}]")
        if stage < FINAL_STAGE and self.temp_heads is None:
            raise ValueError("progressive stages need use_progl=True")
        upsilon, skips, omega = self.encode(L)
        extras = {}
        if self.capsules is not None:
            x, v, routing = self.capsules(upsilon)
            extras.update(V=v, routing=routing)
        else:
            x = self.adapter(upsilon)
        extras["X"] = x
        if stage == 0:
            logits, ab = self.temp_heads[0](x)
            return ForwardResult(logits, ab, extras)
        # skips = [D4, D3, D2, D1]; DBU^m (m >= 2) uses D^(m-1) = skips[4 - (m-1)]
        y = self.decoder[0](x)
        for m in range(2, min(stage, 4) + 1):
            y = self.decoder[m - 1](y, skips[5 - m])
        if stage < FINAL_STAGE:
            logits, ab = self.temp_heads[stage](y)
            return ForwardResult(logits, ab, extras)
        psi = self.postb(y, skips[0])
        logits, ab = self.head(psi, omega)
        extras["Psi"] = psi
        return ForwardResult(logits, ab, extras)

    def generator_parameters(self):
        """Trainable parameters (everything except the frozen classifier)."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("classifier.")]


def build_discriminator(cfg: NetworkConfig) -> PatchDiscriminator:
    return PatchDiscriminator(cfg.disc_channels, cfg.disc_layers)


def parameter_groups(model: nn.Module) -> set[str]:
    """Top-level component names that own parameters."""
    return {name.split(".", 1)[0] for name, _ in model.named_parameters()}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def colorize(model: Colorizer, L_plane: torch.Tensor) -> torch.Tensor:
    """Full-resolution ab prediction for ``L_plane`` (N x 1 x H x W, in [0, 1])."""
    with torch.no_grad():
        return model(L_plane).ab
