"""Parameter-holding conv layer shared by the model modules."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Conv:
    """1x1 or 3x3 same-padding convolution with fan-in scaled normal init."""

    def __init__(self, name: str, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float64, zero: bool = False, bias_init: float = 0.0):
        shape = (cout, cin, kernel, kernel)
        if zero:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = (rng.standard_normal(shape) / np.sqrt(cin * kernel * kernel)).astype(dtype)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.full((1, cout, 1, 1), bias_init, dtype=dtype))
        self.kernel = kernel
        self.cin = cin
        self.cout = cout

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size
