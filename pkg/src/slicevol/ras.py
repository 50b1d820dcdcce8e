"""Realistic Atlas Score: segment, register to real volumes, compare labels.

A generated volume is treated as an atlas: its predicted segmentation is
carried onto each real volume with the affine transform that aligns the two
images, and the Dice overlap with the real volume's segmentation is the
per-pair score. The built-in segmenter is a per-class Gaussian intensity
model followed by a majority-vote filter; any other segmenter can be plugged
in by passing precomputed label maps.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import convolve

from .errors import FormatError, RegistrationError, SlicevolError, ValidationError
from .metrics import dice
from .phantom import philox
from .registration import RegConfig, register_affine, warp_labels
from .volume import LabelMap, Volume

SIGMA_FLOOR = 1e-4
MIN_CLASS_VOXELS = 10
MAX_FAILURE_FRACTION = 0.5
CONFIDENT_POSTERIOR = 0.999
SEGMENTER_MAGIC = b"SSEG"


@dataclass(frozen=True)
class IntensitySegmenter:
    means: tuple[float, ...]
    sigmas: tuple[float, ...]
    priors: tuple[float, ...]
    smoothing_radius: int = 3

    @property
    def num_classes(self) -> int:
        return len(self.means)


def train_segmenter(training: Sequence[tuple[Volume, LabelMap]], num_classes: int | None = None,
                    smoothing_radius: int = 3) -> IntensitySegmenter:
    """Maximum-likelihood class Gaussians and priors pooled over all voxels."""
    if not training:
        raise ValidationError("segmenter needs at least one labelled volume")
    if smoothing_radius < 1 or smoothing_radius % 2 == 0:
        raise ValidationError("smoothing_radius must be a positive odd integer")
    k = num_classes or training[0][1].num_classes
    sums, sq, counts = np.zeros(k), np.zeros(k), np.zeros(k, dtype=np.int64)
    for v, m in training:
        if v.dims != m.dims:
            raise ValidationError(f"volume dims {v.dims} != label dims {m.dims}")
        labels = m.labels.ravel().astype(np.int64)
        if labels.max() >= k:
            raise ValidationError(f"label {labels.max()} exceeds num_classes {k}")
        x = v.data.ravel().astype(np.float64)
        counts += np.bincount(labels, minlength=k)
        sums += np.bincount(labels, weights=x, minlength=k)
    small = [c for c in range(k) if counts[c] < MIN_CLASS_VOXELS]
    if small:
        raise ValidationError(f"classes {small} have fewer than {MIN_CLASS_VOXELS} training voxels")
    means = sums / counts
    # second pass keeps the variance numerically centred
    for v, m in training:
        labels = m.labels.ravel().astype(np.int64)
        d = v.data.ravel().astype(np.float64) - means[labels]
        sq += np.bincount(labels, weights=d * d, minlength=k)
    sigmas = np.maximum(np.sqrt(sq / counts), SIGMA_FLOOR)
    priors = counts / counts.sum()
    return IntensitySegmenter(tuple(means), tuple(sigmas), tuple(priors), smoothing_radius)


def mode_filter(labels: np.ndarray, num_classes: int, size: int) -> np.ndarray:
    """Majority vote in a ``size``-wide cube; ties go to the smaller label."""
    if size <= 1:
        return labels
    kernel = np.ones((size, size, size), dtype=np.int32)
    votes = np.stack([convolve((labels == c).astype(np.int32), kernel, mode="nearest") for c in range(num_classes)])
    return np.argmax(votes, axis=0)


def segment(s: IntensitySegmenter, v: Volume) -> LabelMap:
    """Per-voxel MAP class under the intensity model, cleaned by the mode filter.

    Only voxels whose MAP posterior is below ``CONFIDENT_POSTERIOR`` take the
    filtered label; confidently classified voxels keep their own, so thin
    structures are not eroded. Expects intensities normalized to [0, 1] like
    the training volumes.
    """
    x = v.data.astype(np.float64)[None]
    mu = np.asarray(s.means)[:, None, None, None]
    sd = np.asarray(s.sigmas)[:, None, None, None]
    logp = np.log(np.asarray(s.priors))[:, None, None, None] - np.log(sd) - 0.5 * ((x - mu) / sd) ** 2
    labels = np.argmax(logp, axis=0)
    if s.smoothing_radius > 1:
        post = np.exp(logp - logp.max(axis=0))
        confidence = 1.0 / post.sum(axis=0)
        filtered = mode_filter(labels, s.num_classes, s.smoothing_radius)
        labels = np.where(confidence >= CONFIDENT_POSTERIOR, labels, filtered)
    return LabelMap(labels, s.num_classes)


def label_entropy(m: LabelMap) -> float:
    """Shannon entropy (bits) of the label histogram."""
    p = m.counts() / m.labels.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


# ------------------------------------------------------------------- score


@dataclass
class PairResult:
    generated: int
    real: int
    status: str
    dice_mean: float = float("nan")
    dice_per_label: dict = field(default_factory=dict)
    objective: float = float("nan")
    error: str = ""


@dataclass
class RasReport:
    pairs: list
    ras: float
    failed: int
    config: dict

    @property
    def succeeded(self) -> int:
        return len(self.pairs) - self.failed


def select_pairs(n_gen: int, n_real: int, pairing: str = "all", k: int | None = None, seed: int = 0):
    """Index pairs ``(g, r)`` to score.

    ``all`` takes every combination, ``matched`` pairs item ``i`` with item
    ``i`` (equal-length lists), and ``random`` takes ``k`` distinct
    combinations, returned in sorted order.
    """
    every = [(g, r) for g in range(n_gen) for r in range(n_real)]
    if pairing == "all":
        return every
    if pairing == "matched":
        if n_gen != n_real:
            raise ValidationError("matched pairing needs equally many generated and real volumes")
        return [(i, i) for i in range(n_gen)]
    if pairing != "random" or not k or k < 1:
        raise ValidationError("pairing must be 'all', 'matched' or 'random' with k >= 1")
    if k >= len(every):
        return every
    idx = np.sort(philox(seed).choice(len(every), k, replace=False))
    return [every[i] for i in idx]


def ras_score(
    generated: Sequence[Volume],
    real: Sequence[tuple[Volume, Optional[LabelMap]]],
    seg: IntensitySegmenter | Callable[[Volume], LabelMap],
    reg: RegConfig | None = None,
    pairing: str = "all",
    k: int | None = None,
    reference_mode: str = "predicted",
    seed: int = 0,
    threads: int = 1,
    generated_labels: Sequence[LabelMap] | None = None,
) -> RasReport:
    """Mean Dice between warped generated segmentations and real references.

    Args:
        generated: generated volumes (the atlases).
        real: ``(volume, labels or None)`` pairs; labels are used as the
            reference when ``reference_mode == "ground-truth"``.
        seg: a trained :class:`IntensitySegmenter` or any callable returning a
            label map for a volume.
        reg: registration settings.
        pairing: ``"all"``, ``"matched"`` or ``"random"`` (``k`` pairs).
        generated_labels: precomputed segmentations of ``generated``, replacing
            the segmenter for them.

    A pair whose registration raises or yields a non-finite objective is
    recorded as failed and excluded from the mean. More than half failing
    raises :class:`RegistrationError`.
    """
    if not generated or not real:
        raise ValidationError("RAS needs non-empty generated and real sets")
    if reference_mode not in ("predicted", "ground-truth"):
        raise ValidationError(f"unknown reference mode {reference_mode!r}")
    reg = reg or RegConfig()
    segment_fn = seg if callable(seg) and not isinstance(seg, IntensitySegmenter) else (lambda v: segment(seg, v))

    gen_labels = list(generated_labels) if generated_labels is not None else [segment_fn(g) for g in generated]
    refs = []
    for i, (vol, labels) in enumerate(real):
        if reference_mode == "ground-truth":
            if labels is None:
                raise ValidationError(f"real volume {i} has no ground-truth labels")
            refs.append(labels)
        else:
            refs.append(segment_fn(vol))

    pairs = select_pairs(len(generated), len(real), pairing, k, seed)

    def run(pair):
        g, r = pair
        try:
            result = register_affine(generated[g], real[r][0], reg)
            if not math.isfinite(result.objective):
                return PairResult(g, r, "fail", error="non-finite registration objective")
            warped = warp_labels(gen_labels[g], result.transform, real[r][0].dims)
            per_label, mean = dice(warped, refs[r])
            if not math.isfinite(mean):
                mean = 0.0
            return PairResult(g, r, "ok", mean, per_label, result.objective)
        except SlicevolError as exc:
            return PairResult(g, r, "fail", error=str(exc))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(p) for p in pairs]

    failed = sum(1 for p in results if p.status != "ok")
    if failed > MAX_FAILURE_FRACTION * len(results):
        raise RegistrationError(f"{failed} of {len(results)} registrations failed")
    scores = [p.dice_mean for p in results if p.status == "ok"]
    config = {
        "pairing": f"k:{k}" if pairing == "random" else pairing,
        "reference_mode": reference_mode,
        "objective": reg.objective,
        "pyramid_levels": reg.pyramid_levels,
        "iters_per_level": reg.iters_per_level,
    }
    return RasReport(results, float(np.mean(scores)), failed, config)


def parse_pairing(text: str) -> tuple[str, int | None]:
    """``all`` | ``matched`` | ``k:N`` -> arguments for :func:`ras_score`."""
    if text in ("all", "matched"):
        return text, None
    if text.startswith("k:"):
        try:
            k = int(text[2:])
        except ValueError:
            k = 0
        if k >= 1:
            return "random", k
    raise ValidationError(f"pairing must be all, matched or k:N, got {text!r}")


def format_report(report: RasReport, gen_names: Sequence[str], real_names: Sequence[str]) -> str:
    lines = []
    for p in report.pairs:
        lines.append(
            f"pair g={gen_names[p.generated]} r={real_names[p.real]} dice={p.dice_mean:.6f} "
            f"obj={p.objective:.6f} status={p.status}"
        )
    lines.append(f"ras={report.ras:.6f} pairs={len(report.pairs)} failed={report.failed}")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------- file format

_SEG_HEADER = struct.Struct("<4sHHH")


def save_segmenter(s: IntensitySegmenter, path) -> None:
    chunks = [_SEG_HEADER.pack(SEGMENTER_MAGIC, 1, s.num_classes, s.smoothing_radius)]
    for triple in zip(s.means, s.sigmas, s.priors):
        chunks.append(struct.pack("<3d", *triple))
    Path(path).write_bytes(b"".join(chunks))


def load_segmenter(path) -> IntensitySegmenter:
    raw = Path(path).read_bytes()
    if len(raw) < _SEG_HEADER.size or raw[:4] != SEGMENTER_MAGIC:
        raise FormatError(f"{path}: not an SSEG segmenter file (bad magic)")
    _, version, k, smoothing = _SEG_HEADER.unpack_from(raw)
    if version != 1 or len(raw) != _SEG_HEADER.size + 24 * k:
        raise FormatError(f"{path}: unsupported version or wrong length")
    triples = [struct.unpack_from("<3d", raw, _SEG_HEADER.size + 24 * i) for i in range(k)]
    means, sigmas, priors = zip(*triples)
    return IntensitySegmenter(tuple(means), tuple(sigmas), tuple(priors), smoothing)
