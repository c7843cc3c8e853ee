"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

import numpy as np

from .ops import weighted_sum
from .tensor import Tape, Tensor


def numeric_gradient(fn, arrays, index, step=1e-5):
    """d fn(*arrays) / d arrays[index] by central differences; ``fn`` returns a float."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = fn(*base)
        flat[k] = orig - step
        lo = fn(*base)
        flat[k] = orig
        gflat[k] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / scale)


def check_op(op, arrays, reduce_weights=None, step=1e-5, grad_mask=None):
    """Compare analytic and numeric gradients of ``sum(op(*inputs) * weights)``.

    Returns the worst relative error over the inputs selected by ``grad_mask``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grad_mask = grad_mask or [True] * len(arrays)

    def scalar(*xs):
        out = op(*[Tensor(x) for x in xs]).data
        w = 1.0 if reduce_weights is None else reduce_weights
        return float(np.sum(out * w))

    tensors = [Tensor(a.copy(), requires_grad=m) for a, m in zip(arrays, grad_mask)]
    with Tape() as tape:
        out = op(*tensors)
        loss = weighted_sum(out, reduce_weights)
    tape.backward(loss)

    worst = 0.0
    for i, (t, m) in enumerate(zip(tensors, grad_mask)):
        if not m:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(scalar, arrays, i, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
