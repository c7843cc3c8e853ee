"""Central point detection network: a small U-Net of bottleneck blocks.

Layout for ``depth`` levels with ``c_l = base_channels * 2**l``::

    stem    conv3x3  in -> c_0
    enc{l}  bottlenecks (c_{l-1} or c_0) -> c_l, keep skip, max-pool
    mid     bottlenecks c_{depth-1} -> c_depth
    dec{l}  upsample, concat skip_l, bottlenecks (c_{l+1} + c_l) -> c_l
    head    conv1x1  c_0 -> out

A bottleneck is GN -> 1x1 -> GN -> 3x3 -> GN -> 1x1, plus the input when
in and out channel counts agree, then one ReLU.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CheckpointMismatchError, ConfigurationError, TrainingError
from .nn import (OptimizerState, ParamStore, Tape, Tensor, concat_channels, conv2d,
                 group_norm, l2_loss, load_checkpoint, max_pool_2x2, optimizer_step, relu,
                 residual_add, save_checkpoint, upsample_2x_nearest)
from .nn.params import conv_params, norm_params


@dataclass(frozen=True)
class BottleneckSpec:
    in_channels: int
    mid_channels: int
    out_channels: int
    groups: int


@dataclass(frozen=True)
class CpdnArch:
    depth: int = 2
    base_channels: int = 8
    bottlenecks_per_level: int = 1
    groups: int = 4
    in_channels: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.bottlenecks_per_level < 1:
            raise ConfigurationError("bottlenecks_per_level must be >= 1")
        if self.base_channels % self.groups:
            raise ConfigurationError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}")

    def channels(self, level):
        return self.base_channels * 2 ** level

    def bottleneck(self, c_in, c_out):
        mid = max(self.groups, math.ceil(c_out / 2 / self.groups) * self.groups)
        return BottleneckSpec(c_in, mid, c_out, self.groups)

    def blocks(self):
        """Ordered ``(prefix, BottleneckSpec)`` pairs for every bottleneck."""
        out = []
        n = self.bottlenecks_per_level
        for level in range(self.depth):
            c_in = self.channels(level - 1) if level else self.channels(0)
            for j in range(n):
                out.append((f"enc{level}.b{j}", self.bottleneck(c_in if j == 0 else self.channels(level),
                                                              self.channels(level))))
        top = self.depth
        for j in range(n):
            c_in = self.channels(top - 1) if j == 0 else self.channels(top)
            out.append((f"mid.b{j}", self.bottleneck(c_in, self.channels(top))))
        for level in reversed(range(self.depth)):
            for j in range(n):
                c_in = self.channels(level + 1) + self.channels(level) if j == 0 else self.channels(level)
                out.append((f"dec{level}.b{j}", self.bottleneck(c_in, self.channels(level))))
        return out

    def check_resolution(self, h, w):
        step = 2 ** self.depth
        if h % step or w % step:
            raise ConfigurationError(
                f"input {h}x{w} must be divisible by 2**depth = {step} (depth={self.depth})")


@dataclass
class CpdnModel:
    arch: CpdnArch
    params: ParamStore
    role: str = "D1"


def build_cpdn(arch: CpdnArch, seed, role="D1", input_size=None) -> CpdnModel:
    if input_size is not None:
        arch.check_resolution(*input_size)
    rng = np.random.default_rng(seed)
    store = ParamStore()
    conv_params(store, "stem", rng, arch.in_channels, arch.channels(0), 3)
    for prefix, spec in arch.blocks():
        norm_params(store, f"{prefix}.gn1", spec.in_channels)
        conv_params(store, f"{prefix}.conv1", rng, spec.in_channels, spec.mid_channels, 1)
        norm_params(store, f"{prefix}.gn2", spec.mid_channels)
        conv_params(store, f"{prefix}.conv2", rng, spec.mid_channels, spec.mid_channels, 3)
        norm_params(store, f"{prefix}.gn3", spec.mid_channels)
        conv_params(store, f"{prefix}.conv3", rng, spec.mid_channels, spec.out_channels, 1)
    conv_params(store, "head", rng, arch.channels(0), arch.out_channels, 1)
    return CpdnModel(arch, store, role)


def bottleneck(x, params, prefix, spec: BottleneckSpec):
    p = params
    h = group_norm(x, spec.groups, p[f"{prefix}.gn1.gamma"], p[f"{prefix}.gn1.beta"])
    h = conv2d(h, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
    h = group_norm(h, spec.groups, p[f"{prefix}.gn2.gamma"], p[f"{prefix}.gn2.beta"])
    h = conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    h = group_norm(h, spec.groups, p[f"{prefix}.gn3.gamma"], p[f"{prefix}.gn3.beta"])
    h = conv2d(h, p[f"{prefix}.conv3.w"], p[f"{prefix}.conv3.b"])
    if spec.in_channels == spec.out_channels:
        h = residual_add(x, h)
    return relu(h)


def forward(model: CpdnModel, image) -> Tensor:
    """Raw (un-thresholded) heatmap ``N x 1 x H x W`` for an ``N x 3 x H x W`` batch."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 3:
        x = Tensor(x.data[None])
    arch, p = model.arch, model.params
    arch.check_resolution(x.shape[2], x.shape[3])
    blocks = dict(arch.blocks())
    n = arch.bottlenecks_per_level

    x = conv2d(x, p["stem.w"], p["stem.b"])
    skips = []
    for level in range(arch.depth):
        for j in range(n):
            x = bottleneck(x, p, f"enc{level}.b{j}", blocks[f"enc{level}.b{j}"])
        skips.append(x)
        x = max_pool_2x2(x)
    for j in range(n):
        x = bottleneck(x, p, f"mid.b{j}", blocks[f"mid.b{j}"])
    for level in reversed(range(arch.depth)):
        x = concat_channels(upsample_2x_nearest(x), skips[level])
        for j in range(n):
            x = bottleneck(x, p, f"dec{level}.b{j}", blocks[f"dec{level}.b{j}"])
    return conv2d(x, p["head.w"], p["head.b"])


def predict(model: CpdnModel, images, batch_size=16):
    """Forward without a tape; returns an ``N x 1 x H x W`` numpy array."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    outs = [forward(model, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


def train_cpdn(model: CpdnModel, images, targets, lr=4e-4, epochs=30, lam=0.5,
               batch_size=4, seed=0, optimizer="adam", stage=None, on_epoch=None):
    """Fit the heatmap regressor with the L2 objective; returns per-epoch mean loss."""
    stage = stage or model.role.lower()
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(images) == 0:
        raise TrainingError("empty training set", stage)
    if images.ndim != 4 or targets.shape != (images.shape[0], 1) + images.shape[2:]:
        raise TrainingError(f"images {images.shape} and targets {targets.shape} do not line up", stage)
    model.arch.check_resolution(images.shape[2], images.shape[3])

    rng = np.random.default_rng(seed)
    opt = OptimizerState(optimizer, lr)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            model.params.zero_grad()
            with Tape() as tape:
                pred = forward(model, images[idx])
                loss = l2_loss(pred, targets[idx], lam)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}", stage)
            tape.backward(loss)
            optimizer_step(opt, model.params)
            losses.append(value)
        log.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch + 1, log[-1])
    return log


def save_model(model: CpdnModel, path):
    meta = {"kind": "cpdn", "role": model.role, "arch": asdict(model.arch)}
    return save_checkpoint(model.params, path, meta)


def load_model(path) -> CpdnModel:
    params, meta = load_checkpoint(path)
    if not meta or meta.get("kind") != "cpdn":
        raise CheckpointMismatchError(f"{path} is not a CPDN checkpoint")
    try:
        arch = CpdnArch(**meta["arch"])
    except (TypeError, KeyError, ConfigurationError) as exc:
        raise CheckpointMismatchError(f"{path}: bad stored architecture: {exc}") from exc
    expected = build_cpdn(arch, 0).params
    if expected.names() != params.names():
        raise CheckpointMismatchError(f"{path}: parameters do not match the stored architecture")
    for name, t in expected.items():
        if params[name].shape != t.shape:
            raise CheckpointMismatchError(f"{path}: {name} has shape {params[name].shape}, expected {t.shape}")
    return CpdnModel(arch, params, meta.get("role", "D1"))
