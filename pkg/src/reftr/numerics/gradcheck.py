"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteGradient
from .tensor import Tape, Tensor, float64_mode


def grad_check(op: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-3,
               seed: int = 0, max_entries: int | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``op`` maps tensors to a tensor of any shape; it is reduced to a scalar by
    a fixed random projection so the check covers a full vector-Jacobian
    product. Each item of ``inputs`` is either an array (wrapped into a fresh
    float64 tensor) or an existing tensor, e.g. a parameter, which is
    perturbed in place and restored. Error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``.

    ``max_entries`` subsamples entries per input for large tensors.
    """
    rng = np.random.default_rng(seed)
    with float64_mode():
        tensors = []
        for x in inputs:
            if isinstance(x, Tensor):
                x.data = x.data.astype(np.float64)
                x.requires_grad = True
                tensors.append(x)
            else:
                tensors.append(Tensor(np.array(x, dtype=np.float64), requires_grad=True))
        for t in tensors:
            t.grad = None

        probe = op(*tensors)
        weights = rng.standard_normal(probe.shape)

        def objective() -> float:
            return float((op(*tensors).data * weights).sum())

        with Tape() as tape:
            out = op(*tensors)
            loss = (out * Tensor(weights)).sum()
        tape.backward(loss)

        worst = 0.0
        for t in tensors:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad
            if not np.all(np.isfinite(analytic)):
                raise NonFiniteGradient("analytic gradient is not finite")
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            a_flat = analytic.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = objective()
                flat[i] = orig - eps
                down = objective()
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                if not np.isfinite(numeric):
                    raise NonFiniteGradient("finite-difference estimate is not finite")
                err = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        return worst
