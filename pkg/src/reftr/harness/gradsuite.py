"""Finite-difference checks for every differentiable op and both composite losses."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .. import numerics as nx
from ..heads import rec_loss, seg_loss

OP_TOL = 1e-4
LOSS_TOL = 1e-3


def _away_from_zero(rng, *shape, margin=0.1):
    x = rng.uniform(margin, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _away_from_kinks(rng, n, kinks, margin=0.05):
    x = rng.uniform(-1.5, 1.5, n)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.sign(x[near] - k + 1e-12) * 2 * margin
    return x


def _boxes(rng, n):
    h, w = rng.uniform(0.1, 0.5, n), rng.uniform(0.1, 0.5, n)
    return np.stack([rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), h, w], axis=1)


def _pair_apart(rng, *shape):
    """Two arrays whose entries differ by at least 0.1, for max/min kinks."""
    a = rng.normal(size=shape)
    return [a, a + _away_from_zero(rng, *shape)]


# name -> (kind, builder(rng) -> (fn, inputs))
CASES: dict[str, tuple[str, Callable]] = {
    "add": ("op", lambda r: (nx.add, [r.normal(size=(3, 4)), r.normal(size=(4,))])),
    "sub": ("op", lambda r: (nx.sub, [r.normal(size=(3, 4)), r.normal(size=(3, 4))])),
    "mul": ("op", lambda r: (nx.mul, [r.normal(size=(3, 4)), r.normal(size=(4,))])),
    "div": ("op", lambda r: (nx.div, [r.normal(size=(3, 4)), _away_from_zero(r, 3, 4, margin=0.5)])),
    "power": ("op", lambda r: (lambda x: nx.power(x, 3.0), [r.normal(size=(5,))])),
    "exp": ("op", lambda r: (nx.exp, [r.normal(size=(5,))])),
    "log": ("op", lambda r: (nx.log, [r.uniform(0.5, 2.0, 5)])),
    "sqrt": ("op", lambda r: (nx.sqrt, [r.uniform(0.5, 2.0, 5)])),
    "abs": ("op", lambda r: (nx.abs_, [_away_from_zero(r, 5)])),
    "sigmoid": ("op", lambda r: (nx.sigmoid, [r.normal(size=(5,)) * 3])),
    "tanh": ("op", lambda r: (nx.tanh, [r.normal(size=(5,))])),
    "relu": ("op", lambda r: (nx.relu, [_away_from_zero(r, 5)])),
    "gelu": ("op", lambda r: (nx.gelu, [r.normal(size=(5,))])),
    "maximum": ("op", lambda r: (nx.maximum, _pair_apart(r, 4))),
    "minimum": ("op", lambda r: (nx.minimum, _pair_apart(r, 4))),
    "clip": ("op", lambda r: (lambda x: nx.clip(x, -0.5, 0.5), [_away_from_kinks(r, 6, (-0.5, 0.5))])),
    "sum": ("op", lambda r: (lambda x: nx.sum_(x, axis=1), [r.normal(size=(3, 4))])),
    "mean": ("op", lambda r: (lambda x: nx.mean(x, axis=0), [r.normal(size=(3, 4))])),
    "reshape": ("op", lambda r: (lambda x: nx.reshape(x, (4, 3)), [r.normal(size=(3, 4))])),
    "transpose": ("op", lambda r: (lambda x: nx.transpose(x, (1, 0, 2)), [r.normal(size=(2, 3, 4))])),
    "getitem": ("op", lambda r: (lambda x: nx.getitem(x, (np.array([0, 2, 0]), slice(1, 3))),
                                 [r.normal(size=(3, 4))])),
    "concat": ("op", lambda r: (lambda a, b: nx.concat([a, b], axis=1), [r.normal(size=(2, 3)),
                                                                          r.normal(size=(2, 2))])),
    "stack": ("op", lambda r: (lambda a, b: nx.stack([a, b], axis=0), [r.normal(size=(2, 3)),
                                                                        r.normal(size=(2, 3))])),
    "matmul": ("op", lambda r: (nx.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))])),
    "softmax": ("op", lambda r: (lambda x: nx.softmax(x, axis=-1), [r.normal(size=(3, 5))])),
    "layer_norm": ("op", lambda r: (nx.layer_norm, [r.normal(size=(3, 6)), r.normal(size=(6,)),
                                                    r.normal(size=(6,))])),
    "conv2d": ("op", lambda r: (lambda x, k, b: nx.conv2d(x, k, b), [r.normal(size=(2, 2, 5, 5)),
                                                                      r.normal(size=(3, 2, 3, 3)),
                                                                      r.normal(size=(3,))])),
    "conv2d_stride2": ("op", lambda r: (lambda x, k: nx.conv2d(x, k, stride=2), [r.normal(size=(1, 2, 6, 6)),
                                                                                  r.normal(size=(2, 2, 3, 3))])),
    "upsample2x_nearest": ("op", lambda r: (nx.upsample2x_nearest, [r.normal(size=(2, 3, 3))])),
    "avgpool2x": ("op", lambda r: (nx.avgpool2x, [r.normal(size=(2, 4, 4))])),
    "embedding": ("op", lambda r: (lambda t: nx.embedding(t, np.array([[0, 2], [2, 1]])), [r.normal(size=(3, 4))])),
    "rec_loss": ("loss", lambda r: ((lambda p, t=_boxes(r, 3): rec_loss(t, p)), [_boxes(r, 3)])),
    "seg_loss": ("loss", lambda r: ((lambda p, s=(r.random((2, 6, 6)) < 0.4).astype(float): seg_loss(s, p)),
                                    [r.uniform(0.05, 0.95, (2, 6, 6))])),
}


@dataclass
class GradResult:
    name: str
    kind: str
    max_error: float
    tolerance: float
    points: int

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def run_grad_suite(names: Optional[list[str]] = None, points: int = 10, seed: int = 0) -> tuple[list, float]:
    """Check each case at ``points`` random inputs (float64); returns results and wall time."""
    start = time.perf_counter()
    results = []
    for name in names or list(CASES):
        if name not in CASES:
            raise KeyError(f"unknown op {name!r}; known: {', '.join(CASES)}")
        kind, build = CASES[name]
        worst = 0.0
        for p in range(points):
            rng = np.random.default_rng([seed, p, sum(map(ord, name))])
            fn, inputs = build(rng)
            worst = max(worst, nx.grad_check(fn, inputs, eps=1e-6, seed=p))
        results.append(GradResult(name, kind, worst, OP_TOL if kind == "op" else LOSS_TOL, points))
    return results, time.perf_counter() - start
