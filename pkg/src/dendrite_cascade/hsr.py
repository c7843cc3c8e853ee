"""Hard sample refinement: patch sampling, a small patch classifier, and the
filter that keeps only the hard-stage detections the classifier accepts.

Training patches are centred on lattice points drawn uniformly from three
regions around every annotated core: the disc of radius ``radius_a``
(positives), the annulus ``(radius_a, radius_b]`` and the annulus
``(radius_b, radius_c]`` (negatives).  Negative centres never fall within
``radius_a`` of any core, so a label is positive exactly when its centre is
near a core.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointMismatchError, ConfigurationError, TrainingError
from .nn import (OptimizerState, ParamStore, Tape, Tensor, bce_loss, conv2d, dense,
                 load_checkpoint, max_pool_2x2, optimizer_step, relu, save_checkpoint, sigmoid)
from .nn.params import conv_params, dense_params


@dataclass(frozen=True)
class PatchSamplerConfig:
    radius_a: float = 4.0
    radius_b: float = 15.0
    radius_c: float = 40.0
    positives_per_core: int = 5
    negatives_per_band: int = 5
    patch_size: int = 80
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.radius_a < self.radius_b < self.radius_c:
            raise ConfigurationError("need 0 < radius_a < radius_b < radius_c")
        if self.patch_size % 2:
            raise ConfigurationError(f"patch_size must be even, got {self.patch_size}")


@dataclass
class PatchSet:
    """Patch references into ``images``; pixels are cut out on demand."""
    images: list
    image_index: np.ndarray
    centers: np.ndarray
    labels: np.ndarray
    core_index: np.ndarray
    band: np.ndarray
    patch_size: int = 80

    def __len__(self):
        return len(self.labels)

    def patches(self, idx):
        idx = np.asarray(idx)
        out = np.empty((len(idx), 3, self.patch_size, self.patch_size))
        for k, i in enumerate(idx):
            out[k] = extract_candidate_patch(self.images[self.image_index[i]], self.centers[i], self.patch_size)
        return out


def _region_points(core, r_in, r_out, shape, inclusive_inner):
    """Integer pixels at distance in (r_in, r_out] (or [0, r_out) for the disc)."""
    h, w = shape
    r0, c0 = core
    span = int(np.ceil(r_out))
    rr, cc = np.mgrid[max(0, r0 - span):min(h, r0 + span + 1), max(0, c0 - span):min(w, c0 + span + 1)]
    dist = np.hypot(rr - r0, cc - c0)
    if inclusive_inner:
        keep = dist < r_out
    else:
        keep = (dist > r_in) & (dist <= r_out)
    return np.stack([rr[keep], cc[keep]], axis=1), dist[keep]


def _near_any_core(points, cores, radius):
    if not len(cores) or not len(points):
        return np.zeros(len(points), dtype=bool)
    c = np.asarray(cores, dtype=np.float64)
    d = np.hypot(points[:, None, 0] - c[None, :, 0], points[:, None, 1] - c[None, :, 1])
    return (d <= radius).any(axis=1)


def sample_training_patches(samples, cfg: PatchSamplerConfig) -> PatchSet:
    rng = np.random.default_rng(cfg.seed)
    images, img_idx, centers, labels, core_idx, bands = [], [], [], [], [], []
    for si, sample in enumerate(samples):
        image = np.asarray(sample.image, dtype=np.float64)
        images.append(image)
        shape = image.shape[-2:]
        for ci, core in enumerate(sample.cores):
            core = (int(core[0]), int(core[1]))
            regions = [
                ("A", 1, cfg.positives_per_core, _region_points(core, 0.0, cfg.radius_a, shape, True)[0]),
                ("B", 0, cfg.negatives_per_band, _region_points(core, cfg.radius_a, cfg.radius_b, shape, False)[0]),
                ("C", 0, cfg.negatives_per_band, _region_points(core, cfg.radius_b, cfg.radius_c, shape, False)[0]),
            ]
            for band, label, k, pts in regions:
                if label == 0:
                    pts = pts[~_near_any_core(pts, sample.cores, cfg.radius_a)]
                if len(pts) == 0 or k == 0:
                    continue
                pick = rng.integers(0, len(pts), size=k)
                for p in pts[pick]:
                    img_idx.append(si)
                    centers.append(p)
                    labels.append(label)
                    core_idx.append(ci)
                    bands.append(band)
    return PatchSet(
        images=images,
        image_index=np.asarray(img_idx, dtype=np.int64),
        centers=np.asarray(centers, dtype=np.int64).reshape(-1, 2),
        labels=np.asarray(labels, dtype=np.float64),
        core_index=np.asarray(core_idx, dtype=np.int64),
        band=np.asarray(bands, dtype="<U1"),
        patch_size=cfg.patch_size,
    )


def extract_candidate_patch(image, point, size=80):
    """``size x size`` window of a 3 x H x W image centred at ``point``, zero padded.

    Rows ``i - size/2 .. i + size/2 - 1`` and likewise for columns.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    half = size // 2
    i, j = int(point[0]), int(point[1])
    out = np.zeros((c, size, size))
    r0, r1 = max(0, i - half), min(h, i + half)
    c0, c1 = max(0, j - half), min(w, j + half)
    if r0 < r1 and c0 < c1:
        out[:, r0 - (i - half):r1 - (i - half), c0 - (j - half):c1 - (j - half)] = image[:, r0:r1, c0:c1]
    return out


@dataclass
class HsrModel:
    params: ParamStore
    channels: tuple = (4, 8, 8)
    patch_size: int = 80
    meta: dict = field(default_factory=dict)


def build_hsr(seed, patch_size=80, channels=(4, 8, 8)) -> HsrModel:
    """Three conv-ReLU-pool blocks and a dense layer producing one logit.

    The first convolution has stride 2, so an 80 x 80 patch reaches the head
    as ``channels[-1] x 5 x 5``.
    """
    if patch_size % 16:
        raise ConfigurationError(f"patch_size must be divisible by 16, got {patch_size}")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    c_in = 3
    for k, c in enumerate(channels):
        conv_params(store, f"block{k}.conv", rng, c_in, c, 3)
        c_in = c
    side = patch_size // 16
    dense_params(store, "head", rng, c_in * side * side, 1)
    return HsrModel(store, tuple(channels), patch_size)


def hsr_forward(model: HsrModel, patches) -> Tensor:
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if x.shape[1:] != (3, model.patch_size, model.patch_size):
        raise ConfigurationError(f"HSR expects N x 3 x {model.patch_size} x {model.patch_size}, got {x.shape}")
    p = model.params
    for k in range(len(model.channels)):
        x = conv2d(x, p[f"block{k}.conv.w"], p[f"block{k}.conv.b"], stride=2 if k == 0 else 1)
        x = max_pool_2x2(relu(x))
    return dense(x, p["head.w"], p["head.b"])


def hsr_probability(model: HsrModel, patches, batch_size=64):
    patches = np.asarray(patches, dtype=np.float64)
    out = [hsr_forward(model, patches[i:i + batch_size]).data[:, 0] for i in range(0, len(patches), batch_size)]
    return sigmoid(np.concatenate(out)) if out else np.zeros(0)


def train_hsr(model: HsrModel, patch_set: PatchSet, lr=1e-4, epochs=20, batch_size=32, seed=0,
              optimizer="adam", on_epoch=None):
    """Fit the classifier with sigmoid cross-entropy; returns per-epoch (loss, accuracy)."""
    labels = patch_set.labels
    if len(labels) == 0 or len(np.unique(labels)) < 2:
        raise TrainingError("HSR training needs both positive and negative patches", "hsr")
    rng = np.random.default_rng(seed)
    opt = OptimizerState(optimizer, lr)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        losses, correct = [], 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = patch_set.patches(idx)
            y = labels[idx][:, None]
            model.params.zero_grad()
            with Tape() as tape:
                logit = hsr_forward(model, batch)
                loss = bce_loss(logit, y)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}", "hsr")
            tape.backward(loss)
            optimizer_step(opt, model.params)
            losses.append(value * len(idx))
            correct += int(((logit.data > 0) == (y > 0.5)).sum())
        log.append((float(np.sum(losses) / len(labels)), correct / len(labels)))
        if on_epoch is not None:
            on_epoch(epoch + 1, *log[-1])
    return log


def hsr_accuracy(model: HsrModel, patch_set: PatchSet, batch_size=64):
    probs = np.concatenate([hsr_probability(model, patch_set.patches(np.arange(i, min(i + batch_size, len(patch_set)))))
                            for i in range(0, len(patch_set), batch_size)])
    return float(((probs > 0.5) == (patch_set.labels > 0.5)).mean())


def _classifier_fn(model):
    if isinstance(model, HsrModel):
        return lambda patches: hsr_probability(model, patches), model.patch_size
    return model, getattr(model, "patch_size", 80)


def refine(binary_h2, image_i2, model, threshold=0.5):
    """Filter hard-stage detections through the patch classifier.

    Each 8-connected component of ``binary_h2`` is judged by the patch
    centred at its rounded centroid; accepted components are copied into the
    refined map.  ``model`` is an :class:`HsrModel` or any callable mapping an
    ``N x 3 x P x P`` batch to acceptance probabilities.

    Returns ``(refined_map, kept_points, rejected_points)``.
    """
    from .pipeline import component_peaks

    binary = np.asarray(binary_h2) > 0.5
    labels, peaks = component_peaks(binary)
    refined = np.zeros(binary.shape)
    if not peaks:
        return refined, [], []
    classify, size = _classifier_fn(model)
    batch = np.stack([extract_candidate_patch(image_i2, p, size) for _, p in peaks])
    probs = np.asarray(classify(batch), dtype=np.float64).reshape(-1)
    kept, rejected = [], []
    for (lab, p), prob in zip(peaks, probs):
        if prob > threshold:
            refined[labels == lab] = 1.0
            kept.append(p)
        else:
            rejected.append(p)
    return refined, sorted(kept), sorted(rejected)


def save_hsr(model: HsrModel, path):
    meta = {"kind": "hsr", "channels": list(model.channels), "patch_size": model.patch_size}
    return save_checkpoint(model.params, path, meta)


def load_hsr(path) -> HsrModel:
    params, meta = load_checkpoint(path)
    if not meta or meta.get("kind") != "hsr":
        raise CheckpointMismatchError(f"{path} is not an HSR checkpoint")
    try:
        expected = build_hsr(0, meta["patch_size"], tuple(meta["channels"])).params
    except (TypeError, KeyError, ConfigurationError) as exc:
        raise CheckpointMismatchError(f"{path}: bad stored architecture: {exc}") from exc
    if expected.names() != params.names() or any(params[n].shape != t.shape for n, t in expected.items()):
        raise CheckpointMismatchError(f"{path}: parameters do not match the stored architecture")
    return HsrModel(params, tuple(meta["channels"]), meta["patch_size"])

