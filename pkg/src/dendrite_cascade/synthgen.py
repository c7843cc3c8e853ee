"""Synthetic dendrite micrographs with point annotations.

Each dendrite is a four-armed cross with short perpendicular side branches,
drawn as Gaussian ridges whose intensity peaks at the core.  Hard cases
come from whole-image blur, image noise (speckle, salt-and-pepper, dark
spots) and per-dendrite occlusion of an angular sector.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DataError

FLAGS = ("easy", "blurred", "noisy", "incomplete")
NOISE_MODES = ("gaussian", "salt_pepper", "spots")
BACKGROUND = 0.1
SPLIT_FRACTIONS = {"train": 0.6, "val": 0.2, "test": 0.2}


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    cores_min: int = 2
    cores_max: int = 6
    min_core_separation: float = 16.0
    arm_length_min: float = 8.0
    arm_length_max: float = 14.0
    arm_count: int = 4
    branches_per_arm: int = 2
    ridge_width: float = 0.9
    blur_prob: float = 0.3
    blur_sigma_min: float = 1.5
    blur_sigma_max: float = 2.5
    noise_prob: float = 0.2
    incomplete_prob: float = 0.3
    border_margin: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("blur_prob", "noise_prob", "incomplete_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {p}")
        if self.min_core_separation <= 2:
            raise ConfigurationError("min_core_separation must exceed 2 px")
        if not 1 <= self.cores_min <= self.cores_max:
            raise ConfigurationError("need 1 <= cores_min <= cores_max")
        if self.image_size <= 2 * self.border_margin:
            raise ConfigurationError("image_size too small for border_margin")
        if not 0 <= self.arm_length_min <= self.arm_length_max:
            raise ConfigurationError("need 0 <= arm_length_min <= arm_length_max")


@dataclass
class SynthSample:
    """One image (3 x S x S, values in [0, 1]) and its annotated cores."""
    image: np.ndarray
    cores: list
    flags: list
    name: str = ""
    clean: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class DendriteParams:
    amplitude: float = 1.0
    arm_length: float = 10.0
    angle: float = 0.0
    arm_count: int = 4
    branches_per_arm: int = 2
    ridge_width: float = 0.9


def _segment_ridge(rr, cc, start, direction, length, amp0, amp1, width):
    """Gaussian ridge along a segment whose peak fades linearly from amp0 to amp1."""
    dr, dc = rr - start[0], cc - start[1]
    t = np.clip(dr * direction[0] + dc * direction[1], 0.0, length)
    pr = dr - t * direction[0]
    pc = dc - t * direction[1]
    frac = t / length if length > 0 else np.zeros_like(t)
    peak = amp0 + (amp1 - amp0) * frac
    return peak * np.exp(-(pr * pr + pc * pc) / (2 * width * width))


def render_dendrite(center, params: DendriteParams, canvas):
    """Draw one dendrite onto ``canvas`` (H x W) by pixelwise max; returns a new array."""
    h, w = canvas.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    r0, c0 = float(center[0]), float(center[1])
    amp, length, width = params.amplitude, params.arm_length, params.ridge_width
    layer = amp * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * 1.2 ** 2))
    if length > 0:
        for k in range(params.arm_count):
            theta = params.angle + 2 * math.pi * k / params.arm_count
            d = (math.sin(theta), math.cos(theta))
            # arm intensity stays below the core so the core is the ridge maximum
            layer = np.maximum(layer, _segment_ridge(rr, cc, (r0, c0), d, length,
                                                     0.97 * amp, 0.55 * amp, width))
            perp = (-d[1], d[0])
            for b in range(1, params.branches_per_arm + 1):
                t = length * b / (params.branches_per_arm + 1)
                base = (r0 + t * d[0], c0 + t * d[1])
                peak = 0.8 * amp * (1 - 0.45 * t / length)
                side = 0.4 * length * (1 - t / length) + 1.0
                for sign in (1, -1):
                    layer = np.maximum(layer, _segment_ridge(
                        rr, cc, base, (sign * perp[0], sign * perp[1]), side, peak, 0.6 * peak, width))
    return np.maximum(canvas, layer)


def apply_blur(image, sigma):
    if sigma <= 0:
        return np.array(image, dtype=np.float64, copy=True)
    img = np.asarray(image, dtype=np.float64)
    axes = (img.ndim - 2, img.ndim - 1)
    sig = [0.0] * img.ndim
    for a in axes:
        sig[a] = sigma
    return np.clip(ndimage.gaussian_filter(img, sig, mode="nearest"), 0.0, 1.0)


def apply_noise(image, mode, amplitude, rng):
    """Add one kind of microscope noise to a 2-D image.

    ``gaussian``: additive speckle with std ``amplitude``;
    ``salt_pepper``: a fraction ``amplitude`` of pixels forced to 0 or 1;
    ``spots``: ``round(amplitude * 100)`` dark discs of radius 1-3 px.
    """
    img = np.array(image, dtype=np.float64, copy=True)
    if amplitude <= 0:
        return img
    if mode == "gaussian":
        img = img + rng.normal(0.0, amplitude, size=img.shape)
    elif mode == "salt_pepper":
        hit = rng.random(img.shape) < amplitude
        img[hit] = rng.integers(0, 2, size=int(hit.sum())).astype(np.float64)
    elif mode == "spots":
        h, w = img.shape
        rr, cc = np.mgrid[0:h, 0:w]
        for _ in range(max(1, round(amplitude * 100))):
            r, c = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(1.0, 3.0)
            img[(rr - r) ** 2 + (cc - c) ** 2 <= rad * rad] = 0.0
    else:
        raise ConfigurationError(f"unknown noise mode {mode!r}")
    return np.clip(img, 0.0, 1.0)


def occlude(image, core, fraction, start_angle=0.0, keep_radius=1.5, fill=0.0):
    """Erase an angular sector (``fraction`` of a full turn) around ``core``.

    Pixels within ``keep_radius`` of the core survive, so a faint centre
    remains and the core keeps its annotation.
    """
    img = np.array(image, dtype=np.float64, copy=True)
    if fraction <= 0:
        return img
    h, w = img.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dr, dc = rr - core[0], cc - core[1]
    dist = np.hypot(dr, dc)
    if fraction >= 1:
        sector = np.ones_like(dist, dtype=bool)
    else:
        ang = (np.arctan2(dr, dc) - start_angle) % (2 * math.pi)
        sector = ang < 2 * math.pi * fraction
    img[sector & (dist > keep_radius)] = fill
    return np.clip(img, 0.0, 1.0)


def _place_cores(cfg: SynthConfig, rng):
    n = int(rng.integers(cfg.cores_min, cfg.cores_max + 1))
    lo, hi = cfg.border_margin, cfg.image_size - 1 - cfg.border_margin
    cores = []
    attempts = 0
    while len(cores) < n and attempts < 2000:
        attempts += 1
        p = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
        if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= cfg.min_core_separation for q in cores):
            cores.append(p)
    return cores


def generate_sample(cfg: SynthConfig, seed, name=""):
    """Render one sample; pure function of ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    cores = _place_cores(cfg, rng)
    canvas = np.full((s, s), BACKGROUND)
    incomplete = []
    for core in cores:
        params = DendriteParams(
            amplitude=float(rng.uniform(0.7, 1.0)),
            arm_length=float(rng.uniform(cfg.arm_length_min, cfg.arm_length_max)),
            angle=float(rng.uniform(0, math.pi / 2)),
            arm_count=cfg.arm_count,
            branches_per_arm=cfg.branches_per_arm,
            ridge_width=cfg.ridge_width,
        )
        layer = render_dendrite(core, params, np.zeros((s, s)))
        is_incomplete = bool(rng.random() < cfg.incomplete_prob)
        if is_incomplete:
            layer = occlude(layer, core, float(rng.uniform(0.45, 0.8)), float(rng.uniform(0, 2 * math.pi)))
        incomplete.append(is_incomplete)
        canvas = np.maximum(canvas, layer)

    # render before any image-level degradation; annotations are audited against it
    clean = canvas.copy()
    blurred = bool(rng.random() < cfg.blur_prob)
    if blurred:
        canvas = apply_blur(canvas, float(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)))
    noisy = bool(rng.random() < cfg.noise_prob)
    if noisy:
        mode = NOISE_MODES[int(rng.integers(len(NOISE_MODES)))]
        amp = {"gaussian": rng.uniform(0.05, 0.12), "salt_pepper": rng.uniform(0.02, 0.05),
               "spots": rng.uniform(0.04, 0.10)}[mode]
        canvas = apply_noise(canvas, mode, float(amp), rng)

    flags = []
    for inc in incomplete:
        flags.append("incomplete" if inc else "blurred" if blurred else "noisy" if noisy else "easy")
    image = np.repeat(np.clip(canvas, 0.0, 1.0)[None], 3, axis=0)
    return SynthSample(image=image, cores=cores, flags=flags, name=name, clean=clean)


def sample_seed(seed, index, attempt=0):
    """Per-sample seed ``seed XOR index``; retries append an attempt counter."""
    base = (int(seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF
    return [base] if attempt == 0 else [base, int(attempt)]


def _wanted_flags(cfg):
    wanted = {"easy"}
    if cfg.blur_prob > 0:
        wanted.add("blurred")
    if cfg.noise_prob > 0:
        wanted.add("noisy")
    if cfg.incomplete_prob > 0:
        wanted.add("incomplete")
    return wanted


def generate_samples(cfg: SynthConfig, count):
    """All samples in memory, with the difficulty-coverage guarantee applied."""
    samples = [generate_sample(cfg, sample_seed(cfg.seed, i), sample_name(i)) for i in range(count)]
    if count < 50:
        return samples
    for flag in sorted(_wanted_flags(cfg)):
        if any(flag in s.flags for s in samples):
            continue
        # re-roll trailing samples until the missing flag shows up
        done = False
        for i in reversed(range(count)):
            for attempt in range(1, 200):
                cand = generate_sample(cfg, sample_seed(cfg.seed, i, attempt), sample_name(i))
                if flag in cand.flags:
                    samples[i] = cand
                    done = True
                    break
            if done:
                break
    return samples


def sample_name(i):
    return f"sample_{i:05d}"


def split_names(names, seed):
    """Seeded 60/20/20 split; each list is returned sorted."""
    n = len(names)
    order = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5EED]).permutation(n)
    n_train = n * 6 // 10
    n_val = n * 2 // 10
    parts = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    return {k: sorted(names[i] for i in v) for k, v in parts.items()}


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    """Write a 3 x H x W (or H x W) float image in [0, 1] as 8-bit RGB PNG."""
    arr = to_uint8(image)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    else:
        arr = np.repeat(arr[..., None], 3, axis=2)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_annotations(path, cores, flags):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "flag"])
        for (r, c), flag in zip(cores, flags):
            writer.writerow([r, c, flag])


def read_annotations(path):
    cores, flags = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cores.append((int(row["row"]), int(row["col"])))
            flags.append(row.get("flag", "easy"))
    return cores, flags


def generate_dataset(cfg: SynthConfig, count, out_dir):
    """Write ``count`` samples plus ``manifest.json`` under ``out_dir``."""
    if count < 5:
        raise ConfigurationError(f"count must be >= 5, got {count}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "annotations").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from exc
    samples = generate_samples(cfg, count)
    for s in samples:
        write_png(out / "images" / f"{s.name}.png", s.image)
        write_annotations(out / "annotations" / f"{s.name}.csv", s.cores, s.flags)
    names = [s.name for s in samples]
    manifest = {
        "count": count,
        "seed": cfg.seed,
        "fractions": SPLIT_FRACTIONS,
        "config": asdict(cfg),
        "split": split_names(names, cfg.seed),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {data_dir}")
    with open(path) as fh:
        return json.load(fh)


def load_split(data_dir, split):
    """Read one split back from disk; images come from the 8-bit PNGs."""
    manifest = load_manifest(data_dir)
    if split not in manifest["split"]:
        raise DataError(f"unknown split {split!r}")
    root = Path(data_dir)
    samples = []
    for name in manifest["split"][split]:
        image = read_png(root / "images" / f"{name}.png")
        cores, flags = read_annotations(root / "annotations" / f"{name}.csv")
        samples.append(SynthSample(image=image, cores=cores, flags=flags, name=name))
    return samples
