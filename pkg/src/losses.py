"""
One-class losses: hypersphere classifier, unsupervised FCDD, the original
semi-supervised FCDD, binary cross-entropy, the BCE-aligned modified FCDD and
its focal compound.

Every loss returns a LossOutput holding the batch value (mean of per-sample
values), the exact gradient wrt its input raster and the per-sample values.
Per-sample terms average over pixels first, then over samples.
"""
from dataclasses import dataclass, field

import numpy as np

from .ndtensor import Raster, as_raster

LN2 = float(np.log(2.0))
DEVIATION_FLOOR = 1e-12
PROB_FLOOR = 1e-12
# p = exp(-h) clamped to [PROB_FLOOR, 1 - PROB_FLOOR] is h clamped to this range
H_LOW = float(-np.log1p(-PROB_FLOOR))
H_HIGH = float(-np.log(PROB_FLOOR))


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    per_sample: np.ndarray
    nonfinite: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.nonfinite is None:
            self.nonfinite = ~np.isfinite(self.per_sample)

    @property
    def finite(self) -> bool:
        return not bool(self.nonfinite.any())


def log1mexp(a) -> np.ndarray:
    """log(1 - exp(-a)) for a >= 0, split at ln 2 to avoid cancellation. Returns -inf at a = 0."""
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(a > LN2, np.log1p(-np.exp(-np.maximum(a, LN2))), np.log(-np.expm1(-np.minimum(a, LN2))))


def _inv_expm1(a) -> np.ndarray:
    """d/da log(1 - exp(-a)) = 1 / (exp(a) - 1)."""
    with np.errstate(divide="ignore", over="ignore"):
        return 1.0 / np.expm1(a)


def pseudo_huber(x) -> np.ndarray:
    """sqrt(x^2 + 1) - 1, elementwise; even and non-negative."""
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(x * x + 1.0) - 1.0


def pseudo_huber_grad(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(x * x + 1.0)


def pixel_prob(heatmap) -> np.ndarray:
    """Normal-class probability exp(-h) of each pixel, in (0, 1]."""
    return np.exp(-np.asarray(heatmap, dtype=np.float64))


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape != (n,):
        raise ValueError(f"expected {n} image labels, got {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("image labels must be 0 or 1")
    return y


def _maps(maps, shape: tuple) -> np.ndarray:
    y = np.asarray(maps, dtype=np.float64)
    if y.size != int(np.prod(shape)):
        raise ValueError(f"label maps of shape {y.shape} do not match heatmap {shape}")
    y = y.reshape(shape)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("ground-truth maps must contain only 0 and 1")
    return y


def _image_term(a: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(1 - y) * a - y * log(1 - exp(-a)) and its derivative wrt a, with a floored in the log."""
    a_c = np.maximum(a, DEVIATION_FLOOR)
    value = (1 - y) * a - y * log1mexp(a_c)
    slope = (1 - y) - y * np.where(a >= DEVIATION_FLOOR, _inv_expm1(a_c), 0.0)
    return value, slope


def hsc_loss(features, centre, labels) -> LossOutput:
    """Hypersphere classifier loss on per-sample feature vectors (n, d)."""
    f = np.asarray(features, dtype=np.float64)
    f = f.reshape(f.shape[0], -1)
    c = np.asarray(centre, dtype=np.float64).reshape(-1)
    if f.shape[1] != c.size:
        raise ValueError(f"feature dim {f.shape[1]} differs from centre dim {c.size}")
    n = f.shape[0]
    y = _labels(labels, n)
    diff = f - c[None, :]
    norm = np.sqrt((diff * diff).sum(axis=1) + 1.0)
    a = norm - 1.0
    per, slope = _image_term(a, y)
    grad = (slope / norm / n)[:, None] * diff
    return LossOutput(float(per.mean()), grad.reshape(np.shape(features)), per)


def fcdd_unsup_loss(z: Raster, labels) -> LossOutput:
    """Unsupervised FCDD loss on low-resolution features z of shape (n, 1, u, v)."""
    z = as_raster(z)
    if z.shape[1] != 1:
        raise ValueError(f"features must be single-channel, got {z.shape[1]} channels")
    n = z.shape[0]
    y = _labels(labels, n)
    cells = z.shape[2] * z.shape[3]
    a = pseudo_huber(z).reshape(n, -1).mean(axis=1)
    per, slope = _image_term(a, y)
    grad = (slope / (cells * n))[:, None, None, None] * pseudo_huber_grad(z)
    return LossOutput(float(per.mean()), grad, per)


def fcdd_ss_loss_original(heatmap: Raster, maps) -> LossOutput:
    """Original semi-supervised FCDD loss on full-resolution heatmaps.

    The anomaly term sits outside the pixel mean, so a sample whose anomalous
    pixels carry zero mass (any all-normal map) evaluates to +inf. Such samples
    are flagged in `nonfinite` and their gradient entries are NaN.
    """
    h = as_raster(heatmap)
    if np.any(h < 0):
        raise ValueError("heatmap entries must be >= 0")
    y = _maps(maps, h.shape)
    n = h.shape[0]
    pixels = h[0].size
    normal = ((1 - y) * h).reshape(n, -1).mean(axis=1)
    s = (y * h).reshape(n, -1).mean(axis=1)
    per = normal - log1mexp(s)
    nonfinite = ~np.isfinite(per)
    with np.errstate(invalid="ignore"):
        anomaly_slope = np.where(nonfinite, np.nan, -_inv_expm1(s))
    grad = ((1 - y) + anomaly_slope[:, None, None, None] * y) / (pixels * n)
    with np.errstate(invalid="ignore"):
        value = float(per.mean())
    return LossOutput(value, grad, per, nonfinite)


def bce_loss(p, y) -> LossOutput:
    """Binary cross-entropy with p clamped to [1e-12, 1 - 1e-12]; gradient wrt p."""
    p = as_raster(p)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    y = _maps(y, p.shape)
    n = p.shape[0]
    pixels = p[0].size
    pc = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    inside = (p >= PROB_FLOOR) & (p <= 1 - PROB_FLOOR)
    per_pixel = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    per = per_pixel.reshape(n, -1).mean(axis=1)
    grad = np.where(inside, -(y / pc - (1 - y) / (1 - pc)), 0.0) / (pixels * n)
    return LossOutput(float(per.mean()), grad, per)


def fcdd_ss_loss_modified(heatmap: Raster, maps) -> LossOutput:
    """BCE-aligned semi-supervised loss: per pixel (1-y) h - y log(1 - exp(-h))."""
    h = as_raster(heatmap)
    if np.any(h < 0):
        raise ValueError("heatmap entries must be >= 0")
    y = _maps(maps, h.shape)
    n = h.shape[0]
    pixels = h[0].size
    h_c = np.maximum(h, DEVIATION_FLOOR)
    per_pixel = (1 - y) * h - y * log1mexp(h_c)
    slope = (1 - y) - y * np.where(h >= DEVIATION_FLOOR, _inv_expm1(h_c), 0.0)
    per = per_pixel.reshape(n, -1).mean(axis=1)
    return LossOutput(float(per.mean()), slope / (pixels * n), per)


def fcdd_focal_loss(heatmap: Raster, maps, gamma: float) -> LossOutput:
    """Modified FCDD compounded with a focal modulator.

    Per pixel: (1-y) h (1-p)^gamma - y p^gamma log(1-p), p = exp(-h) clamped to
    [1e-12, 1 - 1e-12]. gamma = 0 reduces to fcdd_ss_loss_modified.
    """
    if gamma < 0:
        raise ValueError(f"focusing parameter must be >= 0, got {gamma}")
    h = as_raster(heatmap)
    if np.any(h < 0):
        raise ValueError("heatmap entries must be >= 0")
    y = _maps(maps, h.shape)
    n = h.shape[0]
    pixels = h[0].size
    h_c = np.clip(h, H_LOW, H_HIGH)
    inside = ((h >= H_LOW) & (h <= H_HIGH)).astype(np.float64)
    p = np.exp(-h_c)
    q = -np.expm1(-h_c)
    log_q = log1mexp(h_c)
    q_g = q ** gamma
    p_g = p ** gamma

    per_pixel = (1 - y) * h * q_g - y * p_g * log_q
    d_normal = q_g + (gamma * h * q ** (gamma - 1) * p * inside if gamma else 0.0)
    d_anomaly = inside * p_g * (gamma * log_q - _inv_expm1(h_c))
    slope = (1 - y) * d_normal + y * d_anomaly
    per = per_pixel.reshape(n, -1).mean(axis=1)
    return LossOutput(float(per.mean()), slope / (pixels * n), per)
