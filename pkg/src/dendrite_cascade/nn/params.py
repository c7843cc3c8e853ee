from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError
from .tensor import Tensor


class ParamStore:
    """Named parameter tensors, iterated in sorted-name order."""

    def __init__(self, items=None):
        self._params: dict[str, Tensor] = {}
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value, dtype=np.float64))
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(name, self._params[name]) for name in self.names()]

    def __iter__(self):
        return iter(self.names())

    def count(self):
        """Total number of scalar parameters."""
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def copy(self):
        return ParamStore({name: Tensor(t.data.copy()) for name, t in self.items()})

    def state(self):
        return {name: t.data for name, t in self.items()}


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_params(store, prefix, rng, c_in, c_out, k):
    store.add(f"{prefix}.w", kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
    store.add(f"{prefix}.b", np.zeros(c_out))


def norm_params(store, prefix, channels):
    store.add(f"{prefix}.gamma", np.ones(channels))
    store.add(f"{prefix}.beta", np.zeros(channels))


def dense_params(store, prefix, rng, n_in, n_out):
    store.add(f"{prefix}.w", kaiming_uniform(rng, (n_out, n_in), n_in))
    store.add(f"{prefix}.b", np.zeros(n_out))
