"""The detection cascade.

easy stage   raw1 = D1(I1); bin1 = raw1 > alpha; points = component centroids
destruction  I2 = I1 with a (2s x 2s) square around every easy point filled
hard stage   raw2 = D2(I2); bin2 = raw2 > beta
refinement   keep a hard component only if the patch classifier accepts it
merge        final map = bin1 OR refined bin2
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import cpdn
from .cpdn import CpdnArch, build_cpdn, train_cpdn
from .errors import ConfigurationError, TrainingError
from .hsr import PatchSamplerConfig, build_hsr, refine, sample_training_patches, train_hsr

log = logging.getLogger(__name__)

FILL_MODES = ("none", "constant", "gaussian", "constant_plus_boundary_gaussian")
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PipelineConfig:
    alpha: float = 0.4
    beta: float = 0.1
    crop_half_size: int = 40
    fill_mode: str = "constant"
    fill_value: float = 0.0
    gaussian_sigma: float = 10.0
    gaussian_kernel: int = 11
    boundary_band: int = 5
    deviation: float = 10.0
    gt_suppression_radius: float = 0.0
    lambda1: float = 0.5
    lambda2: float = 0.5
    hsr_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.beta <= self.alpha <= 1.0:
            raise ConfigurationError(f"need 0 <= beta <= alpha <= 1, got alpha={self.alpha} beta={self.beta}")
        if self.crop_half_size < 1:
            raise ConfigurationError(f"crop_half_size must be >= 1, got {self.crop_half_size}")
        if self.fill_mode not in FILL_MODES:
            raise ConfigurationError(f"fill_mode must be one of {FILL_MODES}, got {self.fill_mode!r}")
        if self.gaussian_kernel % 2 == 0 or self.gaussian_kernel < 1:
            raise ConfigurationError("gaussian_kernel must be a positive odd size")
        if self.deviation < 0:
            raise ConfigurationError("deviation must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for the three trainable stages."""
    lr1: float = 4e-4
    lr2: float = 1e-4
    lr_hsr: float = 1e-4
    epochs1: int = 30
    epochs2: int = 30
    epochs_hsr: int = 20
    batch_size: int = 4
    hsr_batch_size: int = 32
    gt_radius: int = 2
    optimizer: str = "adam"
    hsr_channels: tuple = (8, 8, 8)
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.gt_radius <= 3:
            raise ConfigurationError(f"gt_radius must be in 1..3, got {self.gt_radius}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for name in ("lr1", "lr2", "lr_hsr"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("epochs1", "epochs2", "epochs_hsr"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.hsr_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")


@dataclass
class StageOutputs:
    raw_h1: np.ndarray
    bin_h1: np.ndarray
    image_i2: np.ndarray
    raw_h2: np.ndarray | None
    bin_h2: np.ndarray | None
    refined_h2: np.ndarray | None
    merged: np.ndarray
    esd_points: list
    hsd_candidates: list = field(default_factory=list)
    hsd_points: list = field(default_factory=list)
    rejected_points: list = field(default_factory=list)
    h2: np.ndarray | None = None

    @property
    def points(self):
        return self.esd_points + self.hsd_points

    def tagged_points(self):
        return [(p, "esd") for p in self.esd_points] + [(p, "hsd") for p in self.hsd_points]


# -- heatmap algebra ---------------------------------------------------------

def gt_heatmap(cores, shape, radius=1):
    """Binary target map: 1 at every pixel closer than ``radius`` to a core.

    ``radius=1`` marks the core pixel alone.
    """
    h, w = shape
    out = np.zeros((h, w))
    if radius <= 1:
        for r, c in cores:
            if 0 <= r < h and 0 <= c < w:
                out[r, c] = 1.0
        return out
    rr, cc = np.mgrid[0:h, 0:w]
    for r, c in cores:
        out[(rr - r) ** 2 + (cc - c) ** 2 < radius * radius] = 1.0
    return out


def binarize_heatmap(raw, tau):
    """1 where ``raw > tau`` (strict), else 0."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"threshold must be in [0, 1], got {tau}")
    return (np.asarray(raw) > tau).astype(np.float64)


def _as_2d(binary):
    arr = np.asarray(binary)
    while arr.ndim > 2:
        if arr.shape[0] != 1:
            raise ConfigurationError(f"expected a single heatmap, got shape {arr.shape}")
        arr = arr[0]
    return arr


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def component_peaks(binary):
    """Label 8-connected components; return ``(labels, [(label, point), ...])`` sorted by point."""
    mask = _as_2d(binary) > 0.5
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return labels, []
    centroids = ndimage.center_of_mass(mask, labels, range(1, n + 1))
    peaks = [(k + 1, (_round_half_up(r), _round_half_up(c))) for k, (r, c) in enumerate(centroids)]
    peaks.sort(key=lambda item: item[1])
    return labels, peaks


def extract_peaks(binary):
    """One point per 8-connected component: its centroid rounded half-up, sorted row-major."""
    return [p for _, p in component_peaks(binary)[1]]


def gaussian_kernel_1d(size, sigma):
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-x * x / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(image, sigma, size=11):
    """Separable ``size x size`` Gaussian over the last two axes, edges replicated."""
    k = gaussian_kernel_1d(size, sigma)
    out = ndimage.convolve1d(np.asarray(image, dtype=np.float64), k, axis=-1, mode="nearest")
    return ndimage.convolve1d(out, k, axis=-2, mode="nearest")


def crop_mask(shape, detections, s):
    """Union of half-open squares ``[i-s, i+s) x [j-s, j+s)`` clipped to the image."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    for i, j in detections:
        mask[max(0, i - s):max(0, min(h, i + s)), max(0, j - s):max(0, min(w, j + s))] = True
    return mask


def crop_out(image, detections, s=40, fill_mode="constant", fill_value=0.0, sigma=10.0,
             kernel=11, band=5):
    """Destroy the structure around each detection.

    ``constant`` fills the squares with ``fill_value``; ``gaussian`` replaces
    them with a Gaussian-smoothed copy of the image; the combined mode fills
    with ``fill_value`` and then smooths an inner band of ``band`` pixels
    along the square boundary.  Pixels outside every square are untouched.
    """
    image = np.asarray(image, dtype=np.float64)
    out = image.copy()
    if fill_mode == "none" or not detections:
        return out
    if s < 1:
        raise ConfigurationError(f"crop half-size must be >= 1, got {s}")
    mask = crop_mask(image.shape[-2:], detections, s)
    if fill_mode == "constant":
        out[..., mask] = fill_value
    elif fill_mode == "gaussian":
        smooth = gaussian_smooth(image, sigma, kernel)
        out[..., mask] = smooth[..., mask]
    elif fill_mode == "constant_plus_boundary_gaussian":
        out[..., mask] = fill_value
        smooth = gaussian_smooth(out, sigma, kernel)
        inner = ndimage.binary_erosion(mask, structure=np.ones((2 * band + 1, 2 * band + 1), bool),
                                       border_value=1)
        ring = mask & ~inner
        out[..., ring] = smooth[..., ring]
    else:
        raise ConfigurationError(f"unknown fill mode {fill_mode!r}")
    return out


def derive_h2(h1, bin_h1, suppression_radius=0.0):
    """Hard-stage target: the easy-stage target with detected pixels zeroed.

    With ``suppression_radius > 0`` every target pixel within that distance
    of a detected point is zeroed as well.
    """
    h1 = np.asarray(h1, dtype=np.float64)
    bin_h1 = np.asarray(bin_h1)
    if h1.shape != bin_h1.shape:
        raise ConfigurationError(f"derive_h2: shape mismatch {h1.shape} vs {bin_h1.shape}")
    h2 = np.where(bin_h1 > 0.5, 0.0, h1)
    if suppression_radius > 0:
        points = extract_peaks(bin_h1)
        if points:
            h, w = h1.shape[-2:]
            rr, cc = np.mgrid[0:h, 0:w]
            near = np.zeros((h, w), dtype=bool)
            for r, c in points:
                near |= (rr - r) ** 2 + (cc - c) ** 2 <= suppression_radius ** 2
            h2 = np.where(near, 0.0, h2)
    return h2


def merge_heatmaps(bin_h1, refined_h2):
    a, b = np.asarray(bin_h1), np.asarray(refined_h2)
    if a.shape != b.shape:
        raise ConfigurationError(f"merge_heatmaps: shape mismatch {a.shape} vs {b.shape}")
    return np.logical_or(a > 0.5, b > 0.5).astype(np.float64)


# -- stage drivers -----------------------------------------------------------

def destroy(image, points, config: PipelineConfig):
    return crop_out(image, points, config.crop_half_size, config.fill_mode, config.fill_value,
                    config.gaussian_sigma, config.gaussian_kernel, config.boundary_band)


def _heatmap(model, image):
    if isinstance(model, cpdn.CpdnModel):
        return cpdn.predict(model, image)[0, 0]
    return np.asarray(model(image), dtype=np.float64).reshape(image.shape[-2:])


def run_pipeline(image, d1, d2, hsr, config: PipelineConfig, stop_after=None):
    """Run the cascade on one 3 x H x W image.

    ``d1``/``d2`` are CPDN models or callables mapping an image to a raw
    heatmap.  ``stop_after`` is ``"esd"`` or ``"hsd"`` for the ablation
    prefixes; with ``hsr=None`` every hard-stage candidate is kept.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 4:
        image = image[0]
    raw1 = _heatmap(d1, image)
    bin1 = binarize_heatmap(raw1, config.alpha)
    esd_points = extract_peaks(bin1)
    i2 = destroy(image, esd_points, config)
    if stop_after == "esd":
        return StageOutputs(raw1, bin1, i2, None, None, None, bin1.copy(), esd_points)

    raw2 = _heatmap(d2, i2)
    bin2 = binarize_heatmap(raw2, config.beta)
    candidates = extract_peaks(bin2)
    if stop_after == "hsd" or hsr is None:
        refined, kept, rejected = bin2.copy(), list(candidates), []
    else:
        refined, kept, rejected = refine(bin2, i2, hsr, config.hsr_threshold)
    merged = merge_heatmaps(bin1, refined)
    esd_set = set(esd_points)
    hsd_points = [p for p in kept if p not in esd_set]
    return StageOutputs(raw1, bin1, i2, raw2, bin2, refined, merged, esd_points,
                        candidates, hsd_points, rejected)


def hard_stage_data(d1, samples, config: PipelineConfig, gt_radius=1):
    """Build (I2, H2) training pairs from the frozen easy-stage detector."""
    images = np.stack([s.image for s in samples])
    raw = cpdn.predict(d1, images)
    i2s, h2s = [], []
    for img, r, s in zip(images, raw, samples):
        bin1 = binarize_heatmap(r[0], config.alpha)
        h1 = gt_heatmap(s.cores, img.shape[-2:], gt_radius)
        i2s.append(destroy(img, extract_peaks(bin1), config))
        h2s.append(derive_h2(h1, bin1, config.gt_suppression_radius)[None])
    return np.stack(i2s), np.stack(h2s)


def stage_seeds(seed):
    """Independent seeds for (d1 init, d1 order, d2 init, d2 order, sampler, hsr init, hsr order)."""
    return [int(x) for x in np.random.SeedSequence(int(seed)).generate_state(7)]


def train_easy_stage(train, arch: CpdnArch, config: PipelineConfig, tc: TrainConfig, on_epoch=None):
    seeds = stage_seeds(tc.seed)
    images = np.stack([s.image for s in train])
    targets = np.stack([gt_heatmap(s.cores, s.image.shape[-2:], tc.gt_radius)[None] for s in train])
    d1 = build_cpdn(arch, seeds[0], role="D1", input_size=images.shape[-2:])
    loss_log = train_cpdn(d1, images, targets, tc.lr1, tc.epochs1, config.lambda1, tc.batch_size,
                          seeds[1], tc.optimizer, stage="d1", on_epoch=on_epoch)
    return d1, loss_log


def train_hard_stage(d1, train, arch: CpdnArch, config: PipelineConfig, tc: TrainConfig, on_epoch=None):
    """Train D2 on destroyed images; D1 is only read."""
    seeds = stage_seeds(tc.seed)
    i2, h2 = hard_stage_data(d1, train, config, tc.gt_radius)
    d2 = build_cpdn(arch, seeds[2], role="D2", input_size=i2.shape[-2:])
    loss_log = train_cpdn(d2, i2, h2, tc.lr2, tc.epochs2, config.lambda2, tc.batch_size,
                          seeds[3], tc.optimizer, stage="d2", on_epoch=on_epoch)
    return d2, loss_log, h2


def train_refiner(train, tc: TrainConfig, sampler: PatchSamplerConfig | None = None, on_epoch=None):
    seeds = stage_seeds(tc.seed)
    sampler = replace(sampler or PatchSamplerConfig(), seed=seeds[4])
    patches = sample_training_patches(train, sampler)
    model = build_hsr(seeds[5], sampler.patch_size, tc.hsr_channels)
    log_ = train_hsr(model, patches, tc.lr_hsr, tc.epochs_hsr, tc.hsr_batch_size, seeds[6],
                     tc.optimizer, on_epoch=on_epoch)
    return model, log_


@dataclass
class CascadeModels:
    d1: object
    d2: object
    hsr: object
    logs: dict = field(default_factory=dict)


def train_cascade(train, val, config: PipelineConfig, arch: CpdnArch, tc: TrainConfig,
                  sampler: PatchSamplerConfig | None = None, d1=None, d2=None, hsr=None,
                  on_stage=None, on_epoch=None):
    """Train D1, then D2 against the frozen D1, then the refiner.

    Already-trained models passed in are reused (stage-level resume).
    ``on_stage(name, model, log)`` fires after each freshly trained stage.
    """
    if not train:
        raise TrainingError("empty training split", "d1")
    logs = {}

    def epoch_cb(stage):
        if on_epoch is None:
            return None
        return lambda *args: on_epoch(stage, *args)

    if d1 is None:
        log.info("training D1 on %d images", len(train))
        d1, logs["d1"] = train_easy_stage(train, arch, config, tc, epoch_cb("d1"))
        if on_stage:
            on_stage("d1", d1, logs["d1"])
    if d2 is None:
        log.info("training D2 against frozen D1")
        d2, logs["d2"], h2 = train_hard_stage(d1, train, arch, config, tc, epoch_cb("d2"))
        logs["h2_empty_fraction"] = float(np.mean([not m.any() for m in h2]))
        if on_stage:
            on_stage("d2", d2, logs["d2"])
    if hsr is None:
        log.info("training HSR")
        hsr, logs["hsr"] = train_refiner(train, tc, sampler, epoch_cb("hsr"))
        if on_stage:
            on_stage("hsr", hsr, logs["hsr"])
    if val:
        logs["val_loss_d1"] = _val_loss(d1, val, config.lambda1, tc.gt_radius)
    return CascadeModels(d1, d2, hsr, logs)


def _val_loss(model, samples, lam, gt_radius):
    images = np.stack([s.image for s in samples])
    targets = np.stack([gt_heatmap(s.cores, s.image.shape[-2:], gt_radius)[None] for s in samples])
    pred = cpdn.predict(model, images)
    return float(np.mean([lam * np.linalg.norm(p - t) for p, t in zip(pred, targets)]))
