from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8) -> AdamState:
    """One AdamW update, in place on ``params[i].data``.

    Weight decay is decoupled: it shrinks the parameter directly and never
    enters the moment estimates. Entries whose grad is ``None`` are left
    untouched (no decay either).
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    step_size = lr / c1
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= step_size * m / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    """AdamW over parameter groups, each ``{"params": [...], "lr": float}``."""

    def __init__(self, groups: list[dict], betas=(0.9, 0.999), weight_decay: float = 1e-4,
                 eps: float = 1e-8):
        self.groups = []
        for g in groups:
            params = list(g["params"])
            self.groups.append({
                "params": params,
                "lr": float(g["lr"]),
                "weight_decay": float(g.get("weight_decay", weight_decay)),
                "state": AdamState.zeros_like(params),
            })
        self.betas = tuple(betas)
        self.eps = eps

    def step(self, lr_scale: float = 1.0) -> None:
        for g in self.groups:
            adamw_step(g["params"], [p.grad for p in g["params"]], g["state"], g["lr"] * lr_scale,
                       self.betas, g["weight_decay"], self.eps)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                              for g in self.groups for p in g["params"] if p.grad is not None))
        if max_norm > 0 and total > max_norm:
            factor = max_norm / (total + 1e-6)
            for g in self.groups:
                for p in g["params"]:
                    if p.grad is not None:
                        p.grad *= factor
        return total
