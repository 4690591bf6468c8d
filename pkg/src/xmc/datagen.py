"""Synthetic data: correlated Gaussian pairs and paired radar/camera scenes.

The Gaussian pairs have a closed-form mutual information and exist solely to
validate the contrastive MI estimator. The scene simulator produces paired
range-azimuth heatmaps and camera images driven by one shared latent per
sample, so the two modalities carry mutual information by construction; a
hidden 4-way class label (empty / pedestrian / cyclist / car) is kept for
evaluation only and is never read during pre-training.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, FormatError, ResampleError
from .seeding import rng_for

CLASS_NAMES = ("empty", "pedestrian", "cyclist", "car")
N_CLASSES = len(CLASS_NAMES)

DATASET_MAGIC = b"XMCD"
DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# correlated Gaussian pairs with known mutual information
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPairConfig:
    """Per-coordinate bivariate normal pairs: zero mean, unit variance,
    correlation ``rho``, independent across coordinates and samples."""

    dim: int
    rho: float
    count: int
    seed: int

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.count < 1:
            raise ConfigError(f"count must be positive, got {self.count}")
        if not abs(self.rho) < 1.0:
            raise ConfigError(f"|rho| must be < 1, got {self.rho}")


def gen_gaussian_pairs(cfg: GaussianPairConfig) -> tuple[np.ndarray, np.ndarray]:
    """Draw (count, dim) arrays x, y with corr(x_ij, y_ij) = rho."""
    rng = rng_for(cfg.seed, "gaussian-pairs")
    x = rng.standard_normal((cfg.count, cfg.dim))
    noise = rng.standard_normal((cfg.count, cfg.dim))
    y = cfg.rho * x + math.sqrt(1.0 - cfg.rho**2) * noise
    return x, y


def analytic_mi(rho: float, dim: int) -> float:
    """Exact MI in nats of the pair distribution: -(dim/2) ln(1 - rho^2)."""
    if not abs(rho) < 1.0:
        raise DomainError(f"|rho| must be < 1, got {rho}")
    if dim < 1:
        raise DomainError(f"dim must be positive, got {dim}")
    return -0.5 * dim * math.log1p(-rho * rho)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSignature:
    extent: tuple[float, float]        # metres
    reflectivity: tuple[float, float]
    patch: str                         # "tall" | "diagonal" | "wide"


# Disjoint extent and reflectivity ranges make the classes separable in both
# modalities while noise keeps the task non-trivial.
CLASS_TABLE: dict[str, ClassSignature] = {
    "pedestrian": ClassSignature((0.3, 0.6), (0.5, 1.0), "tall"),
    "cyclist": ClassSignature((0.8, 1.3), (1.0, 2.0), "diagonal"),
    "car": ClassSignature((1.5, 2.5), (3.0, 6.0), "wide"),
}


@dataclass(frozen=True)
class SceneLatent:
    """One scene: either empty, or a single target with shared geometry."""

    class_id: str
    range_m: float | None = None
    azimuth_rad: float | None = None
    extent_m: float | None = None
    reflectivity: float | None = None

    @property
    def label(self) -> int:
        return CLASS_NAMES.index(self.class_id)


@dataclass(frozen=True)
class SimulatorConfig:
    """Geometry, grid sizes and noise levels of the paired-sensor simulator."""

    range_bins: int = 32
    azimuth_bins: int = 32
    image_height: int = 32
    image_width: int = 32
    range_min: float = 1.0
    range_max: float = 25.0
    azimuth_max: float = math.pi / 3.0
    sigma_radar: float | None = None   # None -> 5% of the weakest car peak
    sigma_image: float = 0.05
    patch_scale: float = 5.0           # patch size = scale*extent/range**patch_power
    patch_power: float = 0.25          # weak size falloff keeps far shapes legible
    pixel_psf: float = 0.7             # camera blur floor, pixels

    def __post_init__(self):
        if min(self.range_bins, self.azimuth_bins,
               self.image_height, self.image_width) < 2:
            raise ConfigError("all grid dimensions must be >= 2")
        if not 0.0 < self.range_min < self.range_max:
            raise ConfigError("need 0 < range_min < range_max")
        if self.sigma_radar is not None and self.sigma_radar < 0.0:
            raise ConfigError("sigma_radar must be >= 0")
        if self.sigma_image < 0.0:
            raise ConfigError("sigma_image must be >= 0")

    @property
    def radar_noise_sigma(self) -> float:
        """Radar noise level: 5% of the peak of the brightest car rendered at
        the far edge of the field, so every car clears the noise by 20x while
        distant pedestrians stay genuinely ambiguous."""
        if self.sigma_radar is not None:
            return self.sigma_radar
        return 0.05 * CLASS_TABLE["car"].reflectivity[1] / self.range_max**2


def sample_scene(class_id: str, rng: np.random.Generator,
                 cfg: SimulatorConfig) -> SceneLatent:
    """Draw one latent: uniform position, class-conditional extent and
    reflectivity. Empty scenes carry no target."""
    if class_id not in CLASS_NAMES:
        raise ConfigError(f"unknown class {class_id!r}")
    if class_id == "empty":
        return SceneLatent("empty")
    sig = CLASS_TABLE[class_id]
    return SceneLatent(
        class_id,
        range_m=rng.uniform(cfg.range_min, cfg.range_max),
        azimuth_rad=rng.uniform(-cfg.azimuth_max, cfg.azimuth_max),
        extent_m=rng.uniform(*sig.extent),
        reflectivity=rng.uniform(*sig.reflectivity),
    )


def render_radar(scene: SceneLatent, cfg: SimulatorConfig,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Range-azimuth heatmap: an isotropic Gaussian blob at the target cell
    with peak ~ reflectivity/range^2 and spread ~ extent, plus folded
    (absolute-value) Gaussian noise. Values are always >= 0."""
    grid = np.zeros((cfg.range_bins, cfg.azimuth_bins))
    if scene.class_id != "empty":
        d_range = (cfg.range_max - cfg.range_min) / cfg.range_bins
        d_az = 2.0 * cfg.azimuth_max / cfg.azimuth_bins
        ci = (scene.range_m - cfg.range_min) / d_range - 0.5
        cj = (scene.azimuth_rad + cfg.azimuth_max) / d_az - 0.5
        amp = scene.reflectivity / scene.range_m**2
        sigma = max(scene.extent_m / d_range, 1e-6)
        ii = np.arange(cfg.range_bins)[:, None]
        jj = np.arange(cfg.azimuth_bins)[None, :]
        grid += amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sigma**2))
    noise = cfg.radar_noise_sigma
    if noise > 0.0:
        if rng is None:
            raise ConfigError("render_radar needs an rng when noise is enabled")
        grid += np.abs(rng.normal(0.0, noise, size=grid.shape))
    return grid


def project_to_image(scene: SceneLatent, cfg: SimulatorConfig) -> tuple[float, float]:
    """Pinhole mapping of the target: column ~ tan(azimuth), row ~ 1/range.

    Raises :class:`ResampleError` when the projection misses the frame.
    """
    col = (cfg.image_width - 1) * 0.5 * (
        1.0 + math.tan(scene.azimuth_rad) / math.tan(cfg.azimuth_max))
    inv_span = 1.0 / cfg.range_min - 1.0 / cfg.range_max
    u = (1.0 / scene.range_m - 1.0 / cfg.range_max) / inv_span
    row = (cfg.image_height - 1) * u
    if not (0.0 <= col <= cfg.image_width - 1 and 0.0 <= row <= cfg.image_height - 1):
        raise ResampleError(
            f"target projects to ({row:.2f}, {col:.2f}) outside the frame")
    return row, col


def render_image(scene: SceneLatent, cfg: SimulatorConfig,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Camera image: a class-shaped unit-intensity patch at the projected
    position (larger when nearer), plus Gaussian pixel noise."""
    img = np.zeros((cfg.image_height, cfg.image_width))
    if scene.class_id != "empty":
        row, col = project_to_image(scene, cfg)
        s = cfg.patch_scale * scene.extent_m / scene.range_m**cfg.patch_power
        psf2 = cfg.pixel_psf**2
        ii = np.arange(cfg.image_height)[:, None] - row
        jj = np.arange(cfg.image_width)[None, :] - col
        patch = CLASS_TABLE[scene.class_id].patch
        if patch == "tall":
            sx2 = (0.5 * s) ** 2 + psf2
            sy2 = (2.0 * s) ** 2 + psf2
            img += np.exp(-0.5 * (jj**2 / sx2 + ii**2 / sy2))
        elif patch == "diagonal":
            # elongated along the image diagonal
            a = (ii + jj) / math.sqrt(2.0)
            b = (ii - jj) / math.sqrt(2.0)
            sa2 = (2.0 * s) ** 2 + psf2
            sb2 = (0.5 * s) ** 2 + psf2
            img += np.exp(-0.5 * (a**2 / sa2 + b**2 / sb2))
        else:  # wide, with quartic falloff for a boxier footprint
            sx2 = (2.2 * s) ** 2 + psf2
            sy2 = (0.9 * s) ** 2 + psf2
            img += np.exp(-0.5 * ((jj**2 / sx2) ** 2 + (ii**2 / sy2) ** 2))
    if cfg.sigma_image > 0.0:
        if rng is None:
            raise ConfigError("render_image needs an rng when noise is enabled")
        img += rng.normal(0.0, cfg.sigma_image, size=img.shape)
    return img


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """All samples plus the index partition.

    ``train_idx``/``test_idx`` form the 80/20 split; within train,
    ``vision_idx`` is reserved for teacher pre-training and
    ``contrastive_idx`` for label-free contrastive training (labels of the
    latter are also what the downstream probes are allowed to see).
    """

    heatmaps: np.ndarray          # (n, R, A)
    images: np.ndarray            # (n, H, W)
    labels: np.ndarray            # (n,) uint8, evaluation-only
    train_idx: np.ndarray
    test_idx: np.ndarray
    vision_idx: np.ndarray
    contrastive_idx: np.ndarray

    @property
    def n(self) -> int:
        return len(self.labels)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.heatmaps, self.images, self.labels,
                    self.train_idx, self.test_idx,
                    self.vision_idx, self.contrastive_idx):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _stratified_split(labels: np.ndarray, indices: np.ndarray, frac: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split ``indices`` per class: ~frac goes to the second part."""
    first, second = [], []
    for c in range(N_CLASSES):
        pool = indices[labels[indices] == c]
        pool = pool[rng.permutation(len(pool))]
        k = int(math.floor(frac * len(pool)))
        second.extend(pool[:k])
        first.extend(pool[k:])
    return np.sort(np.array(first, dtype=np.int64)), np.sort(np.array(second, dtype=np.int64))


def make_dataset(cfg: SimulatorConfig, n: int, seed: int,
                 vision_fraction: float = 0.2) -> Dataset:
    """Generate n paired samples with balanced classes and an 80/20 split.

    Classes are assigned round-robin so per-class counts differ by at most
    one; each sample is rendered from its own counter-based RNG stream keyed
    by (seed, index), so generation order cannot change the result.
    """
    if n < 8:
        raise ConfigError(f"need at least 8 samples, got {n}")
    if not 0.0 <= vision_fraction < 0.8:
        raise ConfigError(f"vision_fraction must be in [0, 0.8), got {vision_fraction}")

    heatmaps = np.empty((n, cfg.range_bins, cfg.azimuth_bins))
    images = np.empty((n, cfg.image_height, cfg.image_width))
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        class_id = CLASS_NAMES[i % N_CLASSES]
        rng = rng_for(seed, "sample", i)
        for _ in range(64):
            scene = sample_scene(class_id, rng, cfg)
            try:
                images[i] = render_image(scene, cfg, rng)
            except ResampleError:
                continue
            heatmaps[i] = render_radar(scene, cfg, rng)
            labels[i] = scene.label
            break
        else:
            raise ConfigError("could not place a target inside the frame; "
                              "check the camera geometry")

    all_idx = np.arange(n, dtype=np.int64)
    train_idx, test_idx = _stratified_split(labels, all_idx, 0.2, rng_for(seed, "split"))
    train_frac = vision_fraction / 0.8  # fraction of *train* reserved for vision
    contrastive_idx, vision_idx = _stratified_split(
        labels, train_idx, train_frac, rng_for(seed, "vision-split"))
    return Dataset(heatmaps, images, labels,
                   train_idx, test_idx, vision_idx, contrastive_idx)


def heatmap_inputs(heatmaps: np.ndarray) -> np.ndarray:
    """Flatten heatmaps and scale each to unit peak (radar AGC); keeps the
    encoder input O(1) despite the 1/range^2 amplitude swing."""
    flat = heatmaps.reshape(len(heatmaps), -1)
    peaks = np.maximum(flat.max(axis=1), 1e-30)
    return flat / peaks[:, None]


def image_inputs(images: np.ndarray) -> np.ndarray:
    """Flatten images; patches are unit intensity already."""
    return images.reshape(len(images), -1)


# ---------------------------------------------------------------------------
# container file format
# ---------------------------------------------------------------------------

def dataset_to_bytes(ds: Dataset) -> bytes:
    """Header: magic, version u16, R, A, H, W, n as little-endian u32;
    then per sample: class u8, heatmap f64 row-major, image f64 row-major."""
    _, r, a = ds.heatmaps.shape
    _, h, w = ds.images.shape
    parts = [DATASET_MAGIC,
             struct.pack("<H5I", DATASET_VERSION, r, a, h, w, ds.n)]
    for i in range(ds.n):
        parts.append(struct.pack("<B", int(ds.labels[i])))
        parts.append(ds.heatmaps[i].astype("<f8").tobytes())
        parts.append(ds.images[i].astype("<f8").tobytes())
    return b"".join(parts)


def splits_to_json(ds: Dataset) -> str:
    payload = {
        "train": ds.train_idx.tolist(),
        "test": ds.test_idx.tolist(),
        "vision": ds.vision_idx.tolist(),
        "contrastive": ds.contrastive_idx.tolist(),
    }
    return json.dumps(payload, sort_keys=True, indent=0) + "\n"


def dataset_from_bytes(blob: bytes, splits_json: str) -> Dataset:
    off = 0

    def take(nbytes: int) -> bytes:
        nonlocal off
        if off + nbytes > len(blob):
            raise FormatError("dataset file truncated")
        out = blob[off:off + nbytes]
        off += nbytes
        return out

    if take(4) != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    version, r, a, h, w, n = struct.unpack("<H5I", take(2 + 20))
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    heatmaps = np.empty((n, r, a))
    images = np.empty((n, h, w))
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        (labels[i],) = struct.unpack("<B", take(1))
        heatmaps[i] = np.frombuffer(take(8 * r * a), dtype="<f8").reshape(r, a)
        images[i] = np.frombuffer(take(8 * h * w), dtype="<f8").reshape(h, w)
    if off != len(blob):
        raise FormatError("dataset file has trailing bytes")

    splits = json.loads(splits_json)
    for key in ("train", "test", "vision", "contrastive"):
        if key not in splits:
            raise FormatError(f"splits sidecar is missing {key!r}")
    return Dataset(
        heatmaps, images, labels,
        np.asarray(splits["train"], dtype=np.int64),
        np.asarray(splits["test"], dtype=np.int64),
        np.asarray(splits["vision"], dtype=np.int64),
        np.asarray(splits["contrastive"], dtype=np.int64),
    )


def save_dataset(path, ds: Dataset) -> None:
    from .runio import atomic_write_bytes, splits_path
    atomic_write_bytes(path, dataset_to_bytes(ds))
    atomic_write_bytes(splits_path(path), splits_to_json(ds).encode("ascii"))


def load_dataset(path) -> Dataset:
    from .runio import splits_path
    with open(path, "rb") as f:
        blob = f.read()
    with open(splits_path(path), "r", encoding="ascii") as f:
        return dataset_from_bytes(blob, f.read())
