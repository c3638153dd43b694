"""Named parameter collections and the Adam optimizer."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .errors import ConfigError, StateError
from .tensor import Tensor


class ParamSet(Mapping):
    """Ordered name -> Tensor map carrying Adam moments and a shared step count."""

    def __init__(self, tensors=None):
        self._tensors = {}
        self.m = {}
        self.v = {}
        self.step = 0
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._tensors[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def count(self):
        """Total number of scalar parameters."""
        return int(sum(t.size for t in self._tensors.values()))

    def snapshot(self):
        """Copy of the parameter values (no tape, no optimizer state)."""
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_values(self, values):
        for name, t in self._tensors.items():
            if values[name].shape != t.shape:
                raise ConfigError(f"shape mismatch for {name}: {values[name].shape} vs {t.shape}")
            t.data = np.array(values[name], dtype=np.float64)

    def copy(self):
        out = ParamSet({name: t.data.copy() for name, t in self._tensors.items()})
        return out


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over every parameter, then clear gradients."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise StateError(f"no gradient for parameters: {', '.join(missing)}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None
