"""Sample-quality metrics: minibatch MMD^2, 3D MS-SSIM and Dice overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ValidationError
from .phantom import philox
from .volume import LabelMap, Volume

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class MmdConfig:
    kernel: str = "dot"
    rbf_bandwidth: float | str = "median"
    num_tests: int = 100
    batch_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.kernel not in ("dot", "rbf"):
            raise ValidationError(f"unknown MMD kernel {self.kernel!r}")
        if self.batch_size < 2 or self.num_tests < 1:
            raise ValidationError("MMD needs batch_size >= 2 and num_tests >= 1")
        if self.rbf_bandwidth != "median" and not float(self.rbf_bandwidth) > 0:
            raise ValidationError("rbf bandwidth must be 'median' or a positive number")


@dataclass
class MsSsimConfig:
    scales: int = 5
    scale_weights: tuple[float, ...] = MS_SSIM_WEIGHTS
    window_size: int = 11
    window_sigma: float = 1.5
    dynamic_range: float = 1.0
    num_pairs: int = 20
    seed: int = 0

    def validate(self) -> None:
        if len(self.scale_weights) != self.scales or self.scales < 1:
            raise ValidationError("need one weight per scale")
        if abs(sum(self.scale_weights) - 1.0) > 1e-3:
            raise ValidationError("MS-SSIM weights must sum to 1 (within 1e-3)")


def _flatten(volumes: Sequence[Volume]) -> np.ndarray:
    dims = {v.dims for v in volumes}
    if len(dims) != 1:
        raise ValidationError(f"volumes have mismatched dims: {sorted(dims)}")
    return np.stack([v.data.ravel() for v in volumes]).astype(np.float64)


def _kernel(a: np.ndarray, b: np.ndarray, cfg: MmdConfig, bandwidth: float) -> np.ndarray:
    if cfg.kernel == "dot":
        return a @ b.T
    sq = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth**2))


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Square root of the median nonzero pairwise squared distance of the pooled batch."""
    pooled = np.concatenate([x, y])
    sq = np.sum(pooled * pooled, 1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T, 0.0)
    vals = d2[np.triu_indices(len(pooled), 1)]
    vals = vals[vals > 0]
    return math.sqrt(float(np.median(vals))) if vals.size else 1.0


def mmd2_biased(x: np.ndarray, y: np.ndarray, cfg: MmdConfig | None = None) -> float:
    """Biased MMD^2 between row-sample matrices, diagonal terms included."""
    cfg = cfg or MmdConfig()
    bw = 1.0
    if cfg.kernel == "rbf":
        bw = median_bandwidth(x, y) if cfg.rbf_bandwidth == "median" else float(cfg.rbf_bandwidth)
    kxx = _kernel(x, x, cfg, bw).mean()
    kyy = _kernel(y, y, cfg, bw).mean()
    kxy = _kernel(x, y, cfg, bw).mean()
    return float(kxx + kyy - 2.0 * kxy)


def mmd2_batch(gen: Sequence[Volume], real: Sequence[Volume], cfg: MmdConfig | None = None):
    """Minibatch MMD^2 averaged over ``num_tests`` random batch pairs.

    Generated and real batches are drawn without replacement from two
    generators seeded identically, so equal-size inputs get the same indices.

    Returns:
        ``(mean, per_test)``.
    """
    cfg = cfg or MmdConfig()
    cfg.validate()
    if len(gen) < cfg.batch_size or len(real) < cfg.batch_size:
        raise ValidationError(f"both sets need at least batch_size={cfg.batch_size} volumes")
    if gen[0].dims != real[0].dims:
        raise ValidationError(f"generated dims {gen[0].dims} != real dims {real[0].dims}")
    xg, xr = _flatten(gen), _flatten(real)
    rng_g, rng_r = philox(cfg.seed), philox(cfg.seed)
    values = []
    for _ in range(cfg.num_tests):
        ig = rng_g.choice(len(gen), cfg.batch_size, replace=False)
        ir = rng_r.choice(len(real), cfg.batch_size, replace=False)
        values.append(mmd2_biased(xg[ig], xr[ir], cfg))
    values = np.array(values)
    return float(values.mean()), values


def stderr(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0


# ------------------------------------------------------------------ MS-SSIM


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(a: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully covered positions."""
    half = win.size // 2
    out = a
    for axis in range(3):
        out = correlate1d(out, win, axis=axis, mode="constant")
    sl = tuple(slice(half, n - half) for n in a.shape)
    return out[sl]


def _pool2(a: np.ndarray) -> np.ndarray:
    d, h, w = (n // 2 * 2 for n in a.shape)
    a = a[:d, :h, :w]
    return a.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))


def _ssim_terms(x, y, win, c1, c2):
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    lum = (2.0 * (mx * my) + c1) / (mx * mx + my * my + c1)
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def effective_scales(dims, cfg: MsSsimConfig) -> tuple[int, int]:
    """Number of usable scales and the window size for volumes of ``dims``.

    Scales stop once the coarsest grid would be smaller than the window; if
    even the finest grid is smaller, the window shrinks to the largest odd
    size that fits.
    """
    m = min(dims)
    win = min(cfg.window_size, m if m % 2 else m - 1)
    scales = 1
    while scales < cfg.scales and m // 2**scales >= win:
        scales += 1
    return scales, max(win, 1)


def ms_ssim(a: Volume, b: Volume, cfg: MsSsimConfig | None = None, *, components: bool = False):
    """Multi-scale SSIM computed natively in 3D.

    Contrast-structure terms are taken at every scale and luminance only at
    the coarsest; each is clamped at zero before the weighted geometric mean.
    Weights of unused scales are dropped and the rest renormalized.
    """
    cfg = cfg or MsSsimConfig()
    cfg.validate()
    if a.dims != b.dims:
        raise ValidationError(f"ms_ssim dims mismatch: {a.dims} vs {b.dims}")
    scales, size = effective_scales(a.dims, cfg)
    weights = np.asarray(cfg.scale_weights[:scales], dtype=np.float64)
    weights = weights / weights.sum()
    win = _gaussian_window(size, cfg.window_sigma)
    c1 = (0.01 * cfg.dynamic_range) ** 2
    c2 = (0.03 * cfg.dynamic_range) ** 2
    x, y = a.data.astype(np.float64), b.data.astype(np.float64)
    cs_values = []
    for s in range(scales):
        lum, cs = _ssim_terms(x, y, win, c1, c2)
        cs_values.append(float(cs.mean()))
        if s == scales - 1:
            final = float((lum * cs).mean())
        else:
            x, y = _pool2(x), _pool2(y)
    if components:
        return cs_values, final
    terms = np.maximum(np.array(cs_values[:-1] + [final]), 0.0)
    return float(np.prod(terms**weights))


def ms_ssim_diversity(samples: Sequence[Volume], cfg: MsSsimConfig | None = None):
    """Mean MS-SSIM over ``num_pairs`` seeded pairs of distinct samples.

    Returns:
        ``(mean, per_pair)``; lower means more diverse.
    """
    cfg = cfg or MsSsimConfig()
    if len(samples) < 2:
        raise ValidationError("need at least two samples for MS-SSIM diversity")
    rng = philox(cfg.seed)
    values = []
    for _ in range(cfg.num_pairs):
        i, j = rng.choice(len(samples), 2, replace=False)
        values.append(ms_ssim(samples[i], samples[j], cfg))
    values = np.array(values)
    return float(values.mean()), values


# --------------------------------------------------------------------- Dice


def dice(a: LabelMap, b: LabelMap) -> tuple[dict, float]:
    """Per-label Dice for labels ``k >= 1`` present in either map, and their mean.

    The mean is nan when neither map has any foreground.
    """
    if a.dims != b.dims:
        raise ValidationError(f"dice dims mismatch: {a.dims} vs {b.dims}")
    if a.num_classes != b.num_classes:
        raise ValidationError(f"dice class count mismatch: {a.num_classes} vs {b.num_classes}")
    la, lb = a.labels.ravel(), b.labels.ravel()
    k = a.num_classes
    size_a = np.bincount(la, minlength=k)
    size_b = np.bincount(lb, minlength=k)
    inter = np.bincount(la[la == lb], minlength=k)
    scores = {}
    for label in range(1, k):
        total = size_a[label] + size_b[label]
        if total:
            scores[label] = 2.0 * inter[label] / total
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean
