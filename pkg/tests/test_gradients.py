"""Finite-difference gradient checks for every differentiable op."""

import numpy as np
import pytest

from dendrite_cascade.nn import (bce_loss, concat_channels, conv2d, dense, group_norm, l2_loss,
                                 max_pool_2x2, relu, residual_add, upsample_2x_nearest)
from dendrite_cascade.nn.gradcheck import check_op

TOL = 1e-6


def away_from_zero(x, margin=1e-3):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def random_shape(rng, max_c=4, even=False):
    c = int(rng.integers(1, max_c + 1))
    h, w = (int(rng.integers(1, 5)) * 2 for _ in range(2)) if even else (int(rng.integers(2, 9)) for _ in range(2))
    return (1, c, h, w)


def case_conv(rng, stride=1, padding="same"):
    shape = random_shape(rng)
    if padding == "valid":
        shape = shape[:2] + (max(shape[2], 3), max(shape[3], 3))
    c_out = int(rng.integers(1, 5))
    k = 3 if rng.random() < 0.7 else 1
    return (lambda x, w, b: conv2d(x, w, b, stride=stride, padding=padding),
            [rng.normal(size=shape), rng.normal(size=(c_out, shape[1], k, k)), rng.normal(size=c_out)])


def case_relu(rng):
    return relu, [away_from_zero(rng.normal(size=random_shape(rng)))]


def case_max_pool(rng):
    # distinct values spaced well beyond the difference step, so no window is near a tie
    shape = random_shape(rng, even=True)
    x = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.05 - 1.0
    return max_pool_2x2, [x]


def case_upsample(rng):
    return upsample_2x_nearest, [rng.normal(size=(1, int(rng.integers(1, 5)), 4, 4))]


def case_group_norm(rng):
    groups = int(rng.integers(1, 3))
    c = groups * int(rng.integers(1, 3))
    shape = (1, c, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    return (lambda x, g, b: group_norm(x, groups, g, b),
            [rng.normal(size=shape), rng.normal(size=c), rng.normal(size=c)])


def case_concat(rng):
    h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    return concat_channels, [rng.normal(size=(1, 2, h, w)), rng.normal(size=(1, 2, h, w))]


def case_residual(rng):
    shape = random_shape(rng)
    return residual_add, [rng.normal(size=shape), rng.normal(size=shape)]


def case_dense(rng):
    shape = random_shape(rng)
    flat = int(np.prod(shape))
    out = int(rng.integers(1, 5))
    return dense, [rng.normal(size=shape), rng.normal(size=(out, flat)), rng.normal(size=out)]


def case_l2(rng):
    shape = random_shape(rng)
    lam = float(rng.uniform(0.1, 2.0))
    return (lambda a, b: l2_loss(a, b, lam), [rng.normal(size=shape), rng.normal(size=shape)])


def case_bce(rng):
    n = int(rng.integers(1, 17))
    labels = rng.integers(0, 2, size=(n, 1))
    return (lambda z: bce_loss(z, labels), [rng.normal(0, 3, size=(n, 1))])


CASES = {
    "conv2d_same": case_conv,
    "conv2d_valid": lambda rng: case_conv(rng, padding="valid"),
    "conv2d_stride2": lambda rng: case_conv(rng, stride=2),
    "relu": case_relu,
    "max_pool_2x2": case_max_pool,
    "upsample_2x_nearest": case_upsample,
    "group_norm": case_group_norm,
    "concat_channels": case_concat,
    "residual_add": case_residual,
    "dense": case_dense,
    "l2_loss": case_l2,
    "bce_loss": case_bce,
}


def worst_error(name, trials=100, seed=0):
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(trials):
        op, arrays = CASES[name](rng)
        weights = rng.normal(size=op(*arrays).shape)
        worst = max(worst, check_op(op, arrays, weights))
    return worst


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_central_differences(name):
    assert worst_error(name) < TOL
