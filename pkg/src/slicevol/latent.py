"""Per-latent-dimension Gaussian models over the slice axis.

For each latent component ``l`` the training codes form a ``T x N`` matrix
``Y_l`` (one column per volume). The model keeps the row mean ``mu_l`` and a
factor ``W_l = U diag(s) / sqrt(N)`` from the SVD of the centered matrix, so
that ``W_l W_l^T`` is exactly the N-denominator sample covariance. New latent
sequences are drawn column by column as ``W_l z_l + mu_l`` with independent
standard normal ``z_l``, i.e. the full-volume covariance is block diagonal.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import CodecModel, _fix_signs, decode_latents, encode_volume
from .errors import FormatError, LengthError, ValidationError
from .volume import Volume, check_axis

MODEL_MAGIC = b"SLGM"
MODEL_VERSION = 1
RIDGE_SCALE = 1e-6
RIDGE_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class SliceLatentModel:
    """Fitted slice-axis Gaussian model.

    Attributes:
        means: ``(L, T)`` array, row ``l`` is ``mu_l``.
        factors: list of ``L`` arrays of shape ``(T, r_l)``.
        num_train: number of training volumes ``N``.
        ridge: diagonal loading added to each block for log-densities.
    """

    means: np.ndarray
    factors: list
    num_train: int
    ridge: float

    @property
    def latent_dim(self) -> int:
        return self.means.shape[0]

    @property
    def num_slices(self) -> int:
        return self.means.shape[1]

    @property
    def ranks(self) -> list[int]:
        return [w.shape[1] for w in self.factors]

    def covariance(self, l: int) -> np.ndarray:
        w = self.factors[l]
        return w @ w.T


def _as_sequences(sequences) -> np.ndarray:
    arrs = [np.asarray(s, dtype=np.float64) for s in sequences]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValidationError(f"latent sequences have mismatched shapes: {sorted(shapes)}")
    stack = np.stack(arrs)
    if stack.ndim != 3 or stack.shape[1] < 1 or stack.shape[2] < 1:
        raise ValidationError("each latent sequence must be a non-empty T x L matrix")
    if not np.all(np.isfinite(stack)):
        raise ValidationError("latent sequences contain non-finite values")
    return stack


def _fit_dimension(y: np.ndarray, rank_tol: float):
    """Mean and covariance factor for one ``T x N`` code matrix."""
    n = y.shape[1]
    mu = y.mean(axis=1)
    centered = y - mu[:, None]
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    # centering round-off would otherwise survive as spurious tiny components
    noise_floor = max(y.shape) * np.finfo(np.float64).eps * np.abs(y).max(initial=0.0)
    keep = (s > rank_tol * s[0]) & (s > noise_floor) if s.size else np.zeros(0, bool)
    w = _fix_signs(u[:, keep]) * (s[keep] / math.sqrt(n))
    return mu, w


def fit_latent_model(sequences, rank_tol: float = 1e-10, threads: int = 1) -> SliceLatentModel:
    """Fit ``mu_l`` and ``W_l`` for every latent component.

    Args:
        sequences: ``N`` arrays of shape ``(T, L)``.
        rank_tol: singular values at or below ``rank_tol * s_max`` are dropped, as are
            those at the round-off level of the data.
        threads: worker count for fitting components in parallel.
    """
    stack = _as_sequences(sequences)  # (N, T, L)
    n, t, latent = stack.shape
    if n < 2:
        raise ValidationError(f"need at least 2 training sequences, got {n}")
    columns = [stack[:, :, l].T for l in range(latent)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            fits = list(pool.map(lambda y: _fit_dimension(y, rank_tol), columns))
    else:
        fits = [_fit_dimension(y, rank_tol) for y in columns]
    means = np.stack([mu for mu, _ in fits])
    factors = [w for _, w in fits]
    avg_var = np.mean([np.sum(w * w) / t for w in factors])
    ridge = max(RIDGE_SCALE * avg_var, RIDGE_FLOOR)
    return SliceLatentModel(means, factors, n, float(ridge))


def sample_latent(m: SliceLatentModel, rng) -> np.ndarray:
    """Draw one ``(T, L)`` latent sequence; each column uses its own noise draw."""
    out = np.empty((m.num_slices, m.latent_dim))
    for l, w in enumerate(m.factors):
        z = np.asarray(rng.standard_normal(w.shape[1]), dtype=np.float64)
        out[:, l] = w @ z + m.means[l]
    return out


def latent_log_density(m: SliceLatentModel, seq) -> float:
    """``sum_l log N(y_l | mu_l, W_l W_l^T + ridge I)``."""
    y = np.asarray(seq, dtype=np.float64)
    if y.shape != (m.num_slices, m.latent_dim):
        raise ValidationError(f"sequence shape {y.shape} does not match model ({m.num_slices}, {m.latent_dim})")
    if not np.all(np.isfinite(y)):
        raise ValidationError("sequence contains non-finite values")
    t = m.num_slices
    total = 0.0
    for l, w in enumerate(m.factors):
        cov = w @ w.T + m.ridge * np.eye(t)
        chol = np.linalg.cholesky(cov)
        r = np.linalg.solve(chol, y[:, l] - m.means[l])
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        total += -0.5 * (r @ r + logdet + t * math.log(2 * math.pi))
    return float(total)


def synthesize_volume(m: SliceLatentModel, codec: CodecModel, rng, axis: int = 0, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Sample a latent sequence and decode it slice by slice into a volume."""
    if codec.latent_dim != m.latent_dim:
        raise ValidationError(f"codec latent dim {codec.latent_dim} != model latent dim {m.latent_dim}")
    return decode_sequence(codec, sample_latent(m, rng), axis, spacing)


def decode_sequence(codec: CodecModel, seq, axis: int = 0, spacing=(1.0, 1.0, 1.0)) -> Volume:
    slices = decode_latents(codec, seq)  # (T, H, W)
    return Volume(np.moveaxis(slices, 0, check_axis(axis)), spacing)


def fit_pipeline(volumes: Sequence[Volume], codec: CodecModel, axis: int = 0, mode: str = "mean", rng=None,
                 rank_tol: float = 1e-10) -> SliceLatentModel:
    """Encode each training volume slice by slice and fit the latent model."""
    dims = {v.dims for v in volumes}
    if len(dims) > 1:
        raise ValidationError(f"training volumes have mismatched dims: {sorted(dims)}")
    codes = [encode_volume(codec, v, axis, mode, rng) for v in volumes]
    return fit_latent_model(codes, rank_tol)


# -------------------------------------------------------------- file format

_MODEL_HEADER = struct.Struct("<4sHIIId")


def save_latent_model(m: SliceLatentModel, path) -> None:
    chunks = [_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, m.latent_dim, m.num_slices, m.num_train, m.ridge)]
    for l, w in enumerate(m.factors):
        chunks.append(np.ascontiguousarray(m.means[l], "<f8").tobytes())
        chunks.append(struct.pack("<I", w.shape[1]))
        chunks.append(np.asfortranarray(w, "<f8").tobytes(order="F"))
    Path(path).write_bytes(b"".join(chunks))


def load_latent_model(path) -> SliceLatentModel:
    raw = Path(path).read_bytes()
    if len(raw) < _MODEL_HEADER.size or raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not an SLGM model file (bad magic)")
    _, version, latent, t, n, ridge = _MODEL_HEADER.unpack_from(raw)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = _MODEL_HEADER.size
    means, factors = [], []
    for l in range(latent):
        if offset + 8 * t + 4 > len(raw):
            raise LengthError(f"{path}: truncated in component {l}")
        means.append(np.frombuffer(raw, "<f8", t, offset).copy())
        offset += 8 * t
        (r,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if offset + 8 * t * r > len(raw):
            raise LengthError(f"{path}: factor {l} truncated")
        factors.append(np.frombuffer(raw, "<f8", t * r, offset).reshape((t, r), order="F").copy())
        offset += 8 * t * r
    if offset != len(raw):
        raise LengthError(f"{path}: {len(raw) - offset} trailing bytes")
    return SliceLatentModel(np.array(means).reshape(latent, t), factors, n, ridge)
