"""Training loops: classifier finetuning, progressive end-to-end, adversarial."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..colorspace import GamutGrid, rarity_weights, soft_encode
from ..network import Classifier, Colorizer
from ..blocks import PatchDiscriminator
from .losses import PerceptualExtractor, loss_adv, loss_ch, loss_class, loss_perc, loss_q
from .optim import Adam
from .schedule import ProgressionSchedule, advance_schedule, initial_schedule

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LossReport:
    phase: str
    epoch: int
    step: int
    components: dict
    total: float = field(init=False)

    def __post_init__(self):
        self.total = float(sum(self.components.values()))

    def csv_lines(self) -> list[str]:
        rows = [f"{self.phase},{self.epoch},{self.step},{k},{v!r}" for k, v in self.components.items()]
        rows.append(f"{self.phase},{self.epoch},{self.step},total,{self.total!r}")
        return rows


class LossLog:
    """Collects reports and optionally streams them to a CSV file."""

    header = "phase,epoch,step,component,value"

    def __init__(self, path=None):
        self.reports: list[LossReport] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w")
            self._fh.write(self.header + "\n")

    def __call__(self, report: LossReport) -> None:
        self.reports.append(report)
        if self._fh is not None:
            self._fh.write("\n".join(report.csv_lines()) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def lines(self) -> list[str]:
        return [self.header] + [ln for r in self.reports for ln in r.csv_lines()]


@dataclass
class ColorData:
    """Stacked training pairs: ``L`` (N x 1 x S x S, in [0, 1]) and ``ab`` (N x 2 x S x S)."""

    L: torch.Tensor
    ab: torch.Tensor

    def __post_init__(self):
        if len(self.L) == 0:
            raise ValueError("empty dataset")
        if self.L.shape[0] != self.ab.shape[0] or self.L.shape[-2:] != self.ab.shape[-2:]:
            raise ValueError("L and ab stacks disagree in shape")

    def __len__(self):
        return self.L.shape[0]


def batches(n: int, batch_size: int, gen: torch.Generator) -> Iterator[torch.Tensor]:
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def downsample_ab(ab: torch.Tensor, size: int) -> torch.Tensor:
    if ab.shape[-1] == size:
        return ab
    return F.interpolate(ab, size=(size, size), mode="area")


def encode_targets(ab: torch.Tensor, grid: GamutGrid, k: int = 5, sigma: float = 5.0) -> torch.Tensor:
    """Soft-encode an ``N x 2 x h x w`` chroma map into ``N x Q x h x w``."""
    z = soft_encode(ab.permute(0, 2, 3, 1).detach().cpu().double().numpy(), grid, k, sigma)
    return torch.from_numpy(z).float().permute(0, 3, 1, 2).contiguous()


def dataset_rarity(data: ColorData, grid: GamutGrid, size: int, lam: float = 0.5,
                   k: int = 5, sigma: float = 5.0) -> np.ndarray:
    encs = (encode_targets(downsample_ab(data.ab[i:i + 1], size), grid, k, sigma).numpy().transpose(0, 2, 3, 1)
            for i in range(len(data)))
    return rarity_weights(encs, grid, lam)


def _check_finite(value: torch.Tensor, phase: str, epoch: int):
    if not torch.isfinite(value):
        raise TrainingError(f"{phase}: non-finite loss at epoch {epoch}")


def grad_norm(named_params) -> float:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def train_classifier(classifier: Classifier, L: torch.Tensor, labels: torch.Tensor, epochs: int,
                     batch_size: int = 4, lr: float = 2e-3, seed: int = 0,
                     on_report: Optional[Callable] = None) -> tuple[Classifier, list[float]]:
    """Train ``classifier`` with cross-entropy, then freeze it.

    Returns the frozen classifier and its training accuracy after every epoch.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    present = torch.bincount(labels, minlength=classifier.n_classes)
    if len(present) > classifier.n_classes or torch.any(present[: classifier.n_classes] == 0):
        raise ValueError(f"every class in [0, {classifier.n_classes}) needs at least one sample")
    gen = torch.Generator().manual_seed(seed)
    opt = Adam(classifier.named_parameters(), lr=lr, clip_norm=None)
    history = []
    step = 0
    for epoch in range(epochs):
        classifier.train()
        for idx in batches(len(L), batch_size, gen):
            opt.zero_grad()
            loss = loss_class(classifier(L[idx]), labels[idx])
            _check_finite(loss, "classifier", epoch)
            loss.backward()
            opt.step()
            step += 1
            if on_report is not None:
                on_report(LossReport("classifier", epoch, step, {"class": float(loss.detach())}))
        classifier.eval()
        with torch.no_grad():
            acc = float((classifier(L).argmax(dim=1) == labels).float().mean())
        history.append(acc)
        log.info("classifier epoch %d: train accuracy %.3f", epoch, acc)
    return classifier.freeze(), history


@dataclass
class End2EndWeights:
    q: float = 1.0
    ch: float = 1.0


def end2end_losses(model: Colorizer, grid: GamutGrid, L, ab, stage: int,
                   weights: End2EndWeights = End2EndWeights(), k: int = 5, sigma: float = 5.0) -> dict:
    """Forward to the head of ``stage`` and return the weighted loss components."""
    out = model(L, stage)
    res = model.head_resolution(stage)
    z = encode_targets(downsample_ab(ab, res), grid, k, sigma)
    ab_target = ab if out.ab.shape[-1] == ab.shape[-1] else downsample_ab(ab, out.ab.shape[-1])
    return {
        "q": weights.q * loss_q(out.logits, z, model.rarity),
        "ch": weights.ch * loss_ch(out.ab, ab_target),
    }


def train_end2end(model: Colorizer, data: ColorData, grid: GamutGrid, epochs: int,
                  schedule: Optional[ProgressionSchedule] = None, rho: int = 30,
                  batch_size: int = 4, lr: float = 2e-3, seed: int = 0,
                  weights: End2EndWeights = End2EndWeights(),
                  on_report: Optional[Callable] = None,
                  on_stage: Optional[Callable] = None,
                  optimizer: Optional[Adam] = None) -> ProgressionSchedule:
    """Progressive end-to-end training; returns the final schedule state.

    ``on_stage(schedule)`` is called whenever the network grows.
    """
    if model.classifier is not None and not model.classifier.frozen:
        raise TrainingError("the classifier must be frozen before end-to-end training")
    if schedule is None:
        schedule = initial_schedule(rho, progressive=model.cfg.use_progl)
    gen = torch.Generator().manual_seed(seed)
    opt = optimizer or Adam(model.generator_parameters(), lr=lr, clip_norm=None)
    step = 0
    start = schedule.epoch
    for epoch in range(start, start + epochs):
        prev_stage = schedule.stage
        schedule = advance_schedule(schedule, epoch)
        if schedule.stage != prev_stage:
            log.info("epoch %d: growing to %s", epoch, schedule.stage_name)
            if on_stage is not None:
                on_stage(schedule)
        model.train()
        for idx in batches(len(data), batch_size, gen):
            opt.zero_grad()
            parts = end2end_losses(model, grid, data.L[idx], data.ab[idx], schedule.stage, weights)
            total = sum(parts.values())
            _check_finite(total, "end2end", epoch)
            total.backward()
            opt.step()
            step += 1
            if on_report is not None:
                on_report(LossReport("end2end", epoch, step, {k: float(v.detach()) for k, v in parts.items()}))
    return schedule


@dataclass
class GanWeights:
    adv: float = 1.0
    perc: float = 1.0
    q: float = 0.0
    ch: float = 0.0


def discriminator_step(disc: PatchDiscriminator, opt: Adam, L, ab_real, ab_fake) -> dict:
    opt.zero_grad()
    parts = {
        "adv_real": loss_adv(disc(L, ab_real), True),
        "adv_fake": loss_adv(disc(L, ab_fake.detach()), False),
    }
    sum(parts.values()).backward()
    opt.step()
    return parts


def generator_step(model: Colorizer, disc: PatchDiscriminator, extractor, grid: GamutGrid,
                   opt: Adam, L, ab, weights: GanWeights = GanWeights()) -> dict:
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        opt.zero_grad()
        out = model(L)
        z = encode_targets(downsample_ab(ab, out.logits.shape[-1]), grid)
        parts = {
            "adv": weights.adv * loss_adv(disc(L, out.ab), True),
            "perc": weights.perc * loss_perc(torch.softmax(out.logits, dim=1), z, extractor),
        }
        if weights.q:
            parts["q"] = weights.q * loss_q(out.logits, z, model.rarity)
        if weights.ch:
            parts["ch"] = weights.ch * loss_ch(out.ab, ab)
        sum(parts.values()).backward()
        opt.step()
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)
    return parts


def train_gan(model: Colorizer, disc: PatchDiscriminator, data: ColorData, grid: GamutGrid,
              epochs: int, extractor: Optional[PerceptualExtractor] = None,
              batch_size: int = 4, lr: float = 2e-3, seed: int = 0,
              weights: GanWeights = GanWeights(), clip_norm: float = 10.0,
              on_report: Optional[Callable] = None) -> None:
    """Alternate discriminator and generator updates for ``epochs`` epochs."""
    if model.classifier is not None and not model.classifier.frozen:
        raise TrainingError("the classifier must be frozen before adversarial training")
    extractor = extractor or PerceptualExtractor(model.cfg.Q, seed=seed)
    gen = torch.Generator().manual_seed(seed)
    g_opt = Adam(model.generator_parameters(), lr=lr, clip_norm=clip_norm)
    d_opt = Adam(disc.named_parameters(), lr=lr, clip_norm=clip_norm)
    step = 0
    for epoch in range(epochs):
        model.train()
        disc.train()
        for idx in batches(len(data), batch_size, gen):
            L, ab = data.L[idx], data.ab[idx]
            with torch.no_grad():
                fake = model(L).ab
            d_parts = discriminator_step(disc, d_opt, L, ab, fake)
            g_parts = generator_step(model, disc, extractor, grid, g_opt, L, ab, weights)
            parts = {"d_" + k: float(v.detach()) for k, v in d_parts.items()}
            parts.update({"g_" + k: float(v.detach()) for k, v in g_parts.items()})
            for k, v in parts.items():
                if not math.isfinite(v):
                    raise TrainingError(f"gan: non-finite {k} at epoch {epoch}")
            step += 1
            if on_report is not None:
                on_report(LossReport("gan", epoch, step, parts))
