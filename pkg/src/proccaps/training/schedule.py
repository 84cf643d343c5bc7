"""Progressive-growth schedule for the end-to-end phase.

The decoder grows one stage every ``rho`` epochs, starting from the
capsule decoder alone.  Each stage before ``PostB`` carries its own
temporary head; reaching ``PostB`` attaches the final head and no
temporary head remains.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from ..network import FINAL_STAGE, STAGES


@dataclass(frozen=True)
class ProgressionSchedule:
    rho: int
    epoch: int = 0
    stage: int = 0
    progressive: bool = True

    def __post_init__(self):
        if self.rho < 1:
            raise ValueError("rho must be >= 1")

    @property
    def stage_name(self) -> str:
        return STAGES[self.stage]

    @property
    def active_tcqb(self) -> Optional[int]:
        return self.stage if self.stage < FINAL_STAGE else None

    @property
    def complete(self) -> bool:
        return self.stage == FINAL_STAGE


def initial_schedule(rho: int, progressive: bool = True) -> ProgressionSchedule:
    return ProgressionSchedule(rho=rho, epoch=0, stage=0 if progressive else FINAL_STAGE, progressive=progressive)


def advance_schedule(s: ProgressionSchedule, epoch: int) -> ProgressionSchedule:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < s.epoch:
        raise ValueError(f"epoch regression: {epoch} < {s.epoch}")
    stage = min(epoch // s.rho, FINAL_STAGE) if s.progressive else FINAL_STAGE
    return replace(s, epoch=epoch, stage=stage)


def stage_trace(rho: int, epochs: int, progressive: bool = True) -> list[tuple[int, str]]:
    """``(epoch, stage name)`` at every epoch where the stage changes."""
    s = initial_schedule(rho, progressive)
    trace = [(0, s.stage_name)]
    for e in range(1, epochs):
        nxt = advance_schedule(s, e)
        if nxt.stage != s.stage:
            trace.append((e, nxt.stage_name))
        s = nxt
    return trace
