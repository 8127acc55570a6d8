"""Adam over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .diffmath import Tensor


class Adam:
    """Standard Adam; updates parameter data in place.

    A tensor that receives exactly-zero gradients at every step keeps zero
    moments and is left bit-identical, which the freeze audit relies on.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(grads)
        if missing:
            raise KeyError(f"missing gradients for: {sorted(missing)}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = float(sum(float(np.sum(g * g)) for g in grads.values()))
    norm = total ** 0.5
    if norm <= max_norm or norm == 0.0:
        return grads
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}
