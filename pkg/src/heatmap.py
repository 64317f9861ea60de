"""
Anomaly heatmaps: pseudo-Huber scoring of low-resolution features, Gaussian
receptive-field upsampling to input resolution, image scores and file export.
"""
import json
import math
import os
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .losses import pseudo_huber
from .model import ReceptiveField
from .ndtensor import Raster, as_raster

HMF_MAGIC = b"HMF1"


@dataclass
class Heatmap:
    values: np.ndarray  # (1, 1, h, w), non-negative
    model_id: str = ""
    sample_id: str = ""
    sigma: float = 0.0

    def __post_init__(self):
        self.values = as_raster(self.values)
        if self.values.shape[:2] != (1, 1):
            raise ValueError(f"a heatmap is a single 1x1xhxw raster, got {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("heatmap entries must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]


def huber_map(z: Raster) -> Raster:
    z = as_raster(z)
    if z.shape[1] != 1:
        raise ValueError(f"features must be single-channel, got {z.shape[1]} channels")
    return pseudo_huber(z)


def default_sigma(rf: ReceptiveField) -> float:
    return rf.size / 4.0


def upsample_weights(n_out: int, n_in: int, stride: int, offset: float, sigma: float) -> np.ndarray:
    """1-D Gaussian weights W[x, i] of low-res cell i at output pixel x.

    Each kernel is centred at offset + i * stride, truncated at radius ceil(3 sigma)
    and normalized over its full window before border pixels are cut off.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(3 * sigma)
    x = np.arange(n_out, dtype=np.float64)[:, None]
    weights = np.zeros((n_out, n_in))
    for i in range(n_in):
        c = offset + i * stride
        t = np.arange(math.ceil(c - radius), math.floor(c + radius) + 1, dtype=np.float64)
        norm = np.exp(-((t - c) ** 2) / (2 * sigma ** 2)).sum()
        d = x[:, 0] - c
        inside = np.abs(d) <= radius
        weights[:, i] = np.where(inside, np.exp(-(d ** 2) / (2 * sigma ** 2)), 0.0) / norm
    return weights


class GaussianUpsampler:
    """Linear, non-trainable map from (n, 1, u, v) to (n, 1, h, w) and its adjoint."""

    def __init__(self, rf: ReceptiveField, sigma: float, lowres_shape: Sequence[int], out_shape: Sequence[int]):
        u, v = (int(d) for d in lowres_shape)
        h, w = (int(d) for d in out_shape)
        self.rf = rf
        self.sigma = float(sigma)
        self.lowres_shape = (u, v)
        self.out_shape = (h, w)
        self.rows = upsample_weights(h, u, rf.stride, rf.offset, sigma)
        self.cols = upsample_weights(w, v, rf.stride, rf.offset, sigma)

    def forward(self, lowres: Raster) -> Raster:
        lowres = as_raster(lowres)
        if lowres.shape[1:] != (1,) + self.lowres_shape:
            raise ValueError(f"expected low-res maps (n, 1, {self.lowres_shape[0]}, {self.lowres_shape[1]}), got {lowres.shape}")
        out = np.einsum("xi,ncij,yj->ncxy", self.rows, lowres, self.cols, optimize=True)
        return np.ascontiguousarray(out)

    __call__ = forward

    def backward(self, grad_out: Raster) -> Raster:
        grad_out = as_raster(grad_out)
        if grad_out.shape[1:] != (1,) + self.out_shape:
            raise ValueError(f"expected gradients (n, 1, {self.out_shape[0]}, {self.out_shape[1]}), got {grad_out.shape}")
        return np.ascontiguousarray(np.einsum("xi,ncxy,yj->ncij", self.rows, grad_out, self.cols, optimize=True))


def gaussian_upsample(lowres: Raster, rf: ReceptiveField, sigma: float, out_shape: Sequence[int],
                      model_id: str = "", sample_id: str = "") -> Heatmap:
    lowres = as_raster(lowres)
    if lowres.shape[0] != 1:
        raise ValueError("gaussian_upsample takes one sample; use GaussianUpsampler for batches")
    up = GaussianUpsampler(rf, sigma, lowres.shape[2:], out_shape)
    return Heatmap(up.forward(lowres), model_id, sample_id, float(sigma))


def image_score(hm: Heatmap) -> float:
    return float(hm.values.mean())


# --- export ---

def write_hmf1(path: str, values: np.ndarray) -> None:
    """HMF1 magic, u32 h, u32 w, then row-major little-endian float64."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape[-2:]
    try:
        with open(path, "wb") as f:
            f.write(HMF_MAGIC)
            f.write(struct.pack("<II", h, w))
            f.write(np.ascontiguousarray(values.reshape(h, w), dtype="<f8").tobytes())
    except OSError as e:
        raise OSError(f"cannot write heatmap {path}: {e}") from e


def read_hmf1(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise OSError(f"cannot read heatmap {path}: {e}") from e
    if blob[:4] != HMF_MAGIC:
        raise ValueError(f"{path}: not an HMF1 raster")
    h, w = struct.unpack_from("<II", blob, 4)
    return np.frombuffer(blob, dtype="<f8", count=h * w, offset=12).reshape(h, w).astype(np.float64)


def preview_bytes(values: np.ndarray, scale_max: float) -> np.ndarray:
    """8-bit preview: floor(255 * v / scale_max); an all-zero scale gives black."""
    values = np.asarray(values, dtype=np.float64)
    if scale_max <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.clip(np.floor(values / scale_max * 255.0), 0, 255).astype(np.uint8)


def export_heatmap(hm: Heatmap, raw_path: str, png_path: str, json_path: Optional[str] = None,
                   scale_max: Optional[float] = None) -> None:
    """Write the exact raster, a grayscale preview and a sidecar with the scaling used."""
    values = hm.values[0, 0]
    if scale_max is None:
        scale_max = float(values.max())
    write_hmf1(raw_path, values)
    try:
        Image.fromarray(preview_bytes(values, scale_max)).save(png_path)
    except OSError as e:
        raise OSError(f"cannot write preview {png_path}: {e}") from e
    if json_path:
        sidecar = {"min": float(values.min()), "max": float(scale_max), "sigma": hm.sigma}
        try:
            with open(json_path, "w", encoding="utf-8") as f:
                json.dump(sidecar, f, sort_keys=True)
        except OSError as e:
            raise OSError(f"cannot write sidecar {json_path}: {e}") from e


def export_heatmaps(heatmaps: Sequence[Heatmap], out_dir: str, names: Optional[Sequence[str]] = None) -> list[str]:
    """Export a batch with one shared preview scale (the batch max). Returns the HMF1 paths."""
    os.makedirs(out_dir, exist_ok=True)
    if not heatmaps:
        return []
    scale_max = max(float(hm.values.max()) for hm in heatmaps)
    batch_min = min(float(hm.values.min()) for hm in heatmaps)
    paths = []
    for k, hm in enumerate(heatmaps):
        stem = names[k] if names else (hm.sample_id or f"heatmap_{k:04d}").replace("/", "_")
        raw = os.path.join(out_dir, stem + ".hmf")
        export_heatmap(hm, raw, os.path.join(out_dir, stem + ".png"), scale_max=scale_max)
        paths.append(raw)
    sidecar = {"min": batch_min, "max": scale_max, "sigma": heatmaps[0].sigma}
    with open(os.path.join(out_dir, "preview_scale.json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True)
    return paths
