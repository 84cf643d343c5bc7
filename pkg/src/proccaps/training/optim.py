"""Adam with explicit, checkpointable state."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class OptimizerState:
    lr: float = 2e-3
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    param_steps: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None,
              betas=BETAS, eps: float = EPS) -> OptimizerState:
    """One in-place Adam update of ``params`` (``name -> tensor``).

    Parameters whose gradient is ``None`` are left alone and their moments
    are not advanced, so blocks that join the graph late start with fresh
    bias correction.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = betas
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        t = state.param_steps.get(name, 0) + 1
        state.param_steps[name] = t
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return state


class Adam:
    """Named-parameter Adam with global-norm gradient clipping."""

    def __init__(self, named_params, lr: float = 2e-3, clip_norm: float | None = 10.0):
        self.params = dict(named_params)
        self.state = OptimizerState(lr=lr)
        self.clip_norm = clip_norm

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        live = [p for p in self.params.values() if p.grad is not None]
        if self.clip_norm is not None and live:
            torch.nn.utils.clip_grad_norm_(live, self.clip_norm)
        adam_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)
