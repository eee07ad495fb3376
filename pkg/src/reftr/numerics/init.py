import math

import numpy as np

from ..errors import BadShape
from .tensor import Tensor, get_default_dtype


def fans(shape) -> tuple[int, int]:
    """(fan_in, fan_out) for a weight of ``shape``.

    Dense weights here are stored ``(in, out)``; conv kernels are
    ``(C_out, C_in, k, k)``.
    """
    if len(shape) < 2:
        raise BadShape(f"fan-in/fan-out undefined for shape {tuple(shape)}")
    if len(shape) == 2:
        return int(shape[0]), int(shape[1])
    receptive = math.prod(shape[2:])
    return int(shape[1]) * receptive, int(shape[0]) * receptive


def xavier_init(shape, rng: np.random.Generator, requires_grad: bool = False) -> Tensor:
    """Uniform(-a, a) with ``a = sqrt(6 / (fan_in + fan_out))``."""
    fan_in, fan_out = fans(shape)
    a = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-a, a, size=tuple(shape)).astype(get_default_dtype())
    return Tensor(data, requires_grad=requires_grad)
