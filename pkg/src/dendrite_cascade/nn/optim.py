from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, UsageError


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    learning_rate: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.algorithm!r}")


def optimizer_step(state: OptimizerState, params):
    """Apply one update in place.  Every parameter must carry a gradient."""
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise UsageError(f"no gradient for parameters: {', '.join(missing[:5])}")
    state.step_count += 1
    lr = state.learning_rate
    if state.algorithm == "sgd":
        for _, t in params.items():
            t.data -= lr * t.grad
        return params

    t_ = state.step_count
    c1 = 1.0 - state.beta1 ** t_
    c2 = 1.0 - state.beta2 ** t_
    for name, t in params.items():
        m, v = state.moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        g = t.grad
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.moments[name] = (m, v)
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
