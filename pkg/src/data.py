"""
Datasets of disk images: directory loading, labelme polygons and their
rasterization into ground-truth maps, the synthetic blob generator, and
preprocessing (resize + per-channel standardization).

Directory layout:
    root/{train,test}/{normal,anomalous}/images/<id>.png
    root/{train,test}/anomalous/masks/<id>.png        (optional, >127 => anomalous)
    root/{train,test}/anomalous/images/<id>.json      (optional labelme file)
    root/manifest.json                                (optional counts + seed)
"""
import glob
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

from .validation import validate_synth_config

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
CLASSES = ("normal", "anomalous")
MASK_THRESHOLD = 127
STD_FLOOR = 1e-6


@dataclass
class Sample:
    image: np.ndarray  # (c, h, w) in [0, 1]
    label: int
    id: str
    gt_map: Optional[np.ndarray] = None  # (h, w) of 0/1

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3:
            raise ValueError(f"sample {self.id}: image must be (c, h, w), got {self.image.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"sample {self.id}: label must be 0 or 1")
        if self.gt_map is None and self.label == 0:
            # maps of healthy disks are all zero and need no labelling
            self.gt_map = np.zeros(self.image.shape[1:], dtype=np.uint8)
        if self.gt_map is not None:
            self.gt_map = np.asarray(self.gt_map, dtype=np.uint8)
            if self.label == 0 and self.gt_map.any():
                raise ValueError(f"sample {self.id}: a normal sample must have an all-zero map")


@dataclass
class DatasetSplit:
    train: list[Sample]
    test: list[Sample]
    channel_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    channel_std: np.ndarray = field(default_factory=lambda: np.zeros(0))
    name: str = "dataset"
    missing_ground_truth: list[str] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        overlap = {s.id for s in self.train} & {s.id for s in self.test}
        if overlap:
            raise ValueError(f"train and test share ids: {sorted(overlap)[:5]}")
        if self.channel_mean.size == 0:
            self.channel_mean, self.channel_std = channel_stats(self.train)


@dataclass
class Polygon:
    vertices: list[tuple[float, float]]
    label: str = ""

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ValueError(f"a polygon needs at least 3 vertices, got {len(self.vertices)}")


def channel_stats(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all pixels of the normal samples."""
    normals = [s.image for s in samples if s.label == 0]
    if not normals:
        if not samples:
            return np.zeros(0), np.zeros(0)
        normals = [s.image for s in samples]
    c = normals[0].shape[0]
    pixels = np.concatenate([img.reshape(c, -1) for img in normals], axis=1)
    return pixels.mean(axis=1), pixels.std(axis=1)


# --- labelme polygons ---

def parse_labelme(text: str) -> list[Polygon]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed labelme JSON: {e}") from e
    shapes = doc.get("shapes") if isinstance(doc, dict) else None
    if not isinstance(shapes, list):
        raise ValueError("labelme JSON has no shapes list")
    polygons = []
    for i, shape in enumerate(shapes):
        points = shape.get("points") if isinstance(shape, dict) else None
        if not isinstance(points, list) or len(points) < 3:
            raise ValueError(f"shape {i}: needs at least 3 points")
        try:
            vertices = [(float(x), float(y)) for x, y in points]
        except (TypeError, ValueError) as e:
            raise ValueError(f"shape {i}: points must be [x, y] pairs") from e
        polygons.append(Polygon(vertices, str(shape.get("label", ""))))
    return polygons


def _on_edges(px: np.ndarray, py: float, xy: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Pixel centres of one row that lie exactly on a polygon edge."""
    hit = np.zeros(px.shape, dtype=bool)
    for k in range(len(xy)):
        (x1, y1), (x2, y2) = xy[k], xy[(k + 1) % len(xy)]
        if py < min(y1, y2) - tol or py > max(y1, y2) + tol:
            continue
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        hit |= (np.abs(cross) <= tol) & (px >= min(x1, x2) - tol) & (px <= max(x1, x2) + tol)
    return hit


def rasterize_polygon(polys: Sequence[Polygon], h: int, w: int) -> np.ndarray:
    """Scanline even-odd fill sampled at pixel centres (x + 0.5, y + 0.5), union over polygons.

    Centres lying exactly on an edge count as inside.
    """
    mask = np.zeros((h, w), dtype=np.uint8)
    px = np.arange(w, dtype=np.float64) + 0.5
    for poly in polys:
        xy = np.asarray(poly.vertices, dtype=np.float64)
        x1, y1 = xy[:, 0], xy[:, 1]
        x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
        for r in range(h):
            py = r + 0.5
            crosses = (y1 > py) != (y2 > py)
            if crosses.any():
                a, b, c, d = x1[crosses], y1[crosses], x2[crosses], y2[crosses]
                xs = np.sort(a + (py - b) * (c - a) / (d - b))
                greater = len(xs) - np.searchsorted(xs, px, side="right")
                row = (greater % 2) == 1
            else:
                row = np.zeros(w, dtype=bool)
            row |= _on_edges(px, py, xy)
            mask[r] |= row.astype(np.uint8)
    return mask


# --- image files ---

def read_image(path: str) -> np.ndarray:
    """8-bit PNG (grayscale or RGB) as a (c, h, w) float array in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except OSError as e:
        raise ValueError(f"cannot read image {path}: {e}") from e
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def read_mask(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except OSError as e:
        raise ValueError(f"cannot read mask {path}: {e}") from e
    return (arr > MASK_THRESHOLD).astype(np.uint8)


def write_image(path: str, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def write_mask(path: str, gt_map: np.ndarray) -> None:
    Image.fromarray((np.asarray(gt_map) > 0).astype(np.uint8) * 255).save(path)


def _load_class_dir(split_dir: str, cls: str, missing: list[str]) -> list[Sample]:
    image_dir = os.path.join(split_dir, cls, "images")
    mask_dir = os.path.join(split_dir, cls, "masks")
    samples = []
    for path in sorted(glob.glob(os.path.join(image_dir, "*.png"))):
        sid = os.path.splitext(os.path.basename(path))[0]
        image = read_image(path)
        label = CLASSES.index(cls)
        gt_map = None
        if label == 1:
            mask_path = os.path.join(mask_dir, sid + ".png")
            json_path = os.path.join(image_dir, sid + ".json")
            if os.path.exists(mask_path):
                gt_map = read_mask(mask_path)
            elif os.path.exists(json_path):
                with open(json_path, "r", encoding="utf-8") as f:
                    gt_map = rasterize_polygon(parse_labelme(f.read()), *image.shape[1:])
            else:
                missing.append(sid)
            if gt_map is not None and gt_map.shape != image.shape[1:]:
                raise ValueError(f"{sid}: ground-truth map {gt_map.shape} does not match image {image.shape[1:]}")
        samples.append(Sample(image, label, sid, gt_map))
    return samples


def load_dataset(root: str, name: Optional[str] = None) -> DatasetSplit:
    """Load a split from the directory layout; labels come from the class directory.

    Anomalous samples without a mask or labelme file are listed in
    `missing_ground_truth` (semi-supervised training refuses them).
    """
    if not os.path.isdir(root):
        raise ValueError(f"dataset root {root} is not a directory")
    missing: list[str] = []
    parts = {}
    for split in SPLITS:
        samples = []
        for cls in CLASSES:
            samples += _load_class_dir(os.path.join(root, split), cls, missing)
        parts[split] = sorted(samples, key=lambda s: s.id)

    manifest = {}
    manifest_path = os.path.join(root, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    ds = DatasetSplit(parts["train"], parts["test"], name=name or manifest.get("name", os.path.basename(root.rstrip("/"))),
                      missing_ground_truth=missing, manifest=manifest)
    counts = manifest.get("counts")
    if counts and counts != split_counts(ds):
        raise ValueError(f"{root}: manifest counts {counts} do not match files {split_counts(ds)}")
    if missing:
        logger.warning("%d anomalous samples have no ground-truth map: %s", len(missing), ", ".join(missing[:10]))
    return ds


def split_counts(ds: DatasetSplit) -> dict:
    return {
        split: {cls: sum(1 for s in getattr(ds, split) if s.label == k) for k, cls in enumerate(CLASSES)}
        for split in SPLITS
    }


def split_summary(ds: DatasetSplit) -> dict:
    return {
        "name": ds.name,
        "counts": split_counts(ds),
        "manifest_counts": ds.manifest.get("counts"),
        "channel_mean": [round(float(v), 6) for v in ds.channel_mean],
        "channel_std": [round(float(v), 6) for v in ds.channel_std],
        "missing_ground_truth": list(ds.missing_ground_truth),
    }


def save_dataset(ds: DatasetSplit, root: str, seed: Optional[int] = None) -> None:
    """Write a split in the load_dataset layout, masks included, plus manifest.json."""
    for split in SPLITS:
        for s in getattr(ds, split):
            cls = CLASSES[s.label]
            image_dir = os.path.join(root, split, cls, "images")
            os.makedirs(image_dir, exist_ok=True)
            write_image(os.path.join(image_dir, s.id + ".png"), s.image)
            if s.label == 1 and s.gt_map is not None:
                mask_dir = os.path.join(root, split, cls, "masks")
                os.makedirs(mask_dir, exist_ok=True)
                write_mask(os.path.join(mask_dir, s.id + ".png"), s.gt_map)
    manifest = {"name": ds.name, "seed": seed, "counts": split_counts(ds)}
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


# --- synthetic blob dataset ---

@dataclass(frozen=True)
class SynthConfig:
    n_normal: int = 500
    n_anomalous: int = 50
    n_test_normal: int = 100
    n_test_anomalous: int = 50
    channels: int = 3
    h: int = 64
    w: int = 64
    blob_sigma: tuple[float, float] = (2.0, 4.0)
    amplitude: float = 0.5
    smoothing: int = 2
    seed: int = 0


def box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    """Separable box mean of width 2 * radius + 1 per channel, edge-padded."""
    if radius <= 0:
        return image.copy()
    k = 2 * radius + 1
    return uniform_filter(np.asarray(image, dtype=np.float64), size=(1, k, k), mode="nearest")


def gaussian_bump(h: int, w: int, cy: float, cx: float, sigma: float, amplitude: float) -> tuple[np.ndarray, np.ndarray]:
    """Additive bump and its half-maximum mask (a disk of radius sigma * sqrt(2 ln 2))."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bump = amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return bump, (bump > 0.5 * amplitude).astype(np.uint8)


def _texture(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    return box_blur(rng.uniform(0.0, 1.0, size=(cfg.channels, cfg.h, cfg.w)), cfg.smoothing)


def _anomaly(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    base = _texture(rng, cfg)
    sigma = rng.uniform(*cfg.blob_sigma)
    margin = math.ceil(3 * sigma)
    cy = rng.uniform(margin, cfg.h - 1 - margin)
    cx = rng.uniform(margin, cfg.w - 1 - margin)
    bump, mask = gaussian_bump(cfg.h, cfg.w, cy, cx, sigma, cfg.amplitude)
    return np.clip(base + bump[None], 0.0, 1.0), mask


def synth_generate(cfg: SynthConfig) -> DatasetSplit:
    """Smoothed-noise normals and blob anomalies with analytically known masks; reproducible from seed."""
    ok, msg = validate_synth_config(cfg)
    if not ok:
        raise ValueError(msg)
    rng = np.random.default_rng(cfg.seed)
    parts = {}
    for split, n_norm, n_anom in (("train", cfg.n_normal, cfg.n_anomalous),
                                  ("test", cfg.n_test_normal, cfg.n_test_anomalous)):
        samples = [Sample(_texture(rng, cfg), 0, f"{split}_n{k:05d}") for k in range(n_norm)]
        for k in range(n_anom):
            image, mask = _anomaly(rng, cfg)
            samples.append(Sample(image, 1, f"{split}_a{k:05d}", mask))
        parts[split] = sorted(samples, key=lambda s: s.id)
    return DatasetSplit(parts["train"], parts["test"], name=f"synth-{cfg.seed}",
                        manifest={"seed": cfg.seed})


# --- experiment protocol helpers ---

def _seeded_subset(anomalies: list[Sample], count: int, seed: int) -> list[Sample]:
    if count > len(anomalies):
        raise ValueError(f"asked for {count} training anomalies, only {len(anomalies)} available")
    keep = set(np.random.default_rng(seed).permutation(len(anomalies))[:count].tolist())
    return [s for k, s in enumerate(anomalies) if k in keep]


def limit_train_anomalies(ds: DatasetSplit, count: int, seed: int = 0) -> DatasetSplit:
    """Keep `count` seeded-randomly chosen anomalous training samples; test split untouched."""
    kept = _seeded_subset([s for s in ds.train if s.label == 1], count, seed)
    train = sorted([s for s in ds.train if s.label == 0] + kept, key=lambda s: s.id)
    return replace(ds, train=train, missing_ground_truth=[m for m in ds.missing_ground_truth
                                                          if any(s.id == m for s in kept)])


def merge_anomalies(ds: DatasetSplit, other: DatasetSplit, limit: Optional[int] = None,
                    seed: int = 0) -> DatasetSplit:
    """Add anomalous training samples of another dataset (ids prefixed by its name).

    With a limit, the added samples are a seeded subset drawn like limit_train_anomalies.
    Channel statistics stay those of the primary split's normals.
    """
    extra = [s for s in other.train if s.label == 1]
    if limit is not None:
        extra = _seeded_subset(extra, limit, seed)
    added = [Sample(s.image, 1, f"{other.name}:{s.id}", s.gt_map) for s in extra]
    missing = ds.missing_ground_truth + [s.id for s in added if s.gt_map is None]
    return replace(ds, train=sorted(ds.train + added, key=lambda s: s.id), missing_ground_truth=missing,
                   name=f"{ds.name}+{other.name}")


# --- preprocessing ---

def resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear interpolation weights (half-pixel centres, edge clamped)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(image: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    c, h, w = image.shape
    th, tw = shape
    if (h, w) == (th, tw):
        return image.copy()
    return np.einsum("xi,cij,yj->cxy", resize_matrix(th, h), image, resize_matrix(tw, w))


def resize_nearest(gt_map: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    h, w = gt_map.shape
    th, tw = shape
    rows = np.minimum(np.floor((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    cols = np.minimum(np.floor((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return gt_map[rows][:, cols]


def standardize(image: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    std = np.maximum(np.asarray(std, dtype=np.float64), STD_FLOOR)
    return (image - np.asarray(mean)[:, None, None]) / std[:, None, None]


def preprocess_image(image: np.ndarray, mean: np.ndarray, std: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    """Resize a (c, h, w) image to target (c, H, W) and standardize; returns (1, c, H, W)."""
    c = int(target_shape[0])
    if image.shape[0] != c:
        if image.shape[0] == 1:
            image = np.repeat(image, c, axis=0)
        else:
            raise ValueError(f"image has {image.shape[0]} channels, model expects {c}")
    resized = resize_bilinear(image, target_shape[1:])
    return standardize(resized, mean, std)[None]


def preprocess(sample: Sample, ds: DatasetSplit, target_shape: Sequence[int]) -> np.ndarray:
    return preprocess_image(sample.image, ds.channel_mean, ds.channel_std, target_shape)


def preprocess_map(sample: Sample, target_shape: Sequence[int]) -> Optional[np.ndarray]:
    if sample.gt_map is None:
        return None
    return resize_nearest(sample.gt_map, target_shape[1:])


def stack_maps(samples: Sequence[Sample], shape: Sequence[int]) -> np.ndarray:
    """Ground-truth maps resized to (H, W) as (n, 1, H, W); samples without a map get -1 entries."""
    h, w = shape[-2:]
    maps = np.full((len(samples), 1, h, w), -1.0)
    for k, s in enumerate(samples):
        if s.gt_map is not None:
            maps[k, 0] = resize_nearest(s.gt_map, (h, w))
    return maps


def stack_batch(samples: Sequence[Sample], ds: DatasetSplit, target_shape: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Preprocessed images (n, c, H, W), image labels (n,) and maps (n, 1, H, W)."""
    x = np.concatenate([preprocess(s, ds, target_shape) for s in samples], axis=0) if samples \
        else np.zeros((0,) + tuple(target_shape))
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return x, labels, stack_maps(samples, target_shape)
