"""Adam optimizer with bias correction.

Hyperparameter defaults beyond the learning rate follow the standard
recommendation (beta1=0.9, beta2=0.999, eps=1e-8). Moment buffers are
allocated lazily, only for tensors that are actually passed to ``step``,
so frozen parameters never acquire optimizer state.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError


class Adam:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[Tensor, np.ndarray] = {}
        self._v: dict[Tensor, np.ndarray] = {}

    def state_size(self) -> int:
        """Number of parameters with allocated moment buffers."""
        return len(self._m)

    def step(self, params: Sequence[Tensor], grads: Mapping[Tensor, np.ndarray]) -> Sequence[Tensor]:
        """Apply one in-place Adam update to every parameter in ``params``."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p in params:
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: gradient shape {g.shape} does not match parameter shape {p.data.shape}")
            m = self._m.get(p)
            if m is None:
                m = self._m[p] = np.zeros_like(p.data)
                self._v[p] = np.zeros_like(p.data)
            v = self._v[p]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


def adam_step(state: Adam, params: Sequence[Tensor], grads: Mapping[Tensor, np.ndarray]) -> Sequence[Tensor]:
    """Functional alias for :meth:`Adam.step`."""
    return state.step(params, grads)
