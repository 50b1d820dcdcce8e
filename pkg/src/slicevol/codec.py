"""Slice codecs: a truncated-SVD linear codec and a fully connected VAE.

Both map an ``H x W`` slice to an ``L``-dimensional latent code and back. The
VAE is trained with Adam on ``0.5 * ||x_hat - x||^2 + beta * KL`` per slice
(unit-variance Gaussian likelihood), with gradients derived by hand.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, LengthError, TrainingError, ValidationError
from .phantom import philox
from .volume import Slice, Volume, check_axis, extract_slices

CODEC_MAGIC = b"SCDC"
CODEC_VERSION = 1
KIND_CODES = {"linear": 1, "vae": 2}
LEAKY_SLOPE = 0.2

LINEAR_KEYS = ("mean_slice", "basis")
VAE_KEYS = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "enc_w3", "enc_b3",
    "dec_w1", "dec_b1", "dec_w2", "dec_b2", "dec_w3", "dec_b3",
)


@dataclass(frozen=True, eq=False)
class CodecModel:
    """Trained slice encoder/decoder.

    ``params`` holds float64 arrays. Linear codecs carry ``mean_slice`` (H*W,)
    and ``basis`` (H*W, L); VAE codecs carry encoder layers sized
    ``[H*W, h, h, 2L]`` and decoder layers sized ``[L, h, h, H*W]`` with weights
    stored as ``(fan_in, fan_out)``.
    """

    kind: str
    slice_dims: tuple[int, int]
    latent_dim: int
    params: dict

    @property
    def num_pixels(self) -> int:
        return self.slice_dims[0] * self.slice_dims[1]

    @property
    def hidden(self) -> int | None:
        return self.params["enc_b1"].size if self.kind == "vae" else None


@dataclass
class TrainConfig:
    learning_rates: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    beta_kl: float = 0.2
    epochs: int = 50
    batch_size: int = 32
    hidden: int = 128
    val_fraction: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.beta_kl < 0:
            raise ValidationError("beta_kl must be >= 0")
        if not self.learning_rates or any(lr <= 0 for lr in self.learning_rates):
            raise ValidationError("learning rates must be a non-empty list of positive values")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValidationError("epochs, batch_size and hidden must be >= 1")


@dataclass
class SweepEntry:
    learning_rate: float
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    diverged: bool = False


@dataclass
class TrainReport:
    entries: list
    selected_lr: float

    @property
    def selected(self) -> SweepEntry:
        return next(e for e in self.entries if e.learning_rate == self.selected_lr and not e.diverged)


def _slice_matrix(slices: Sequence[Slice]) -> np.ndarray:
    if len(slices) == 0:
        raise ValidationError("need at least one slice")
    dims = {s.dims for s in slices}
    if len(dims) != 1:
        raise ValidationError(f"slices have mismatched dims: {sorted(dims)}")
    return np.stack([s.data.ravel() for s in slices]).astype(np.float64)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its first nonzero entry is positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        nz = np.flatnonzero(out[:, j])
        if nz.size and out[nz[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


# ------------------------------------------------------------------ linear


def train_linear_codec(slices: Sequence[Slice], latent_dim: int) -> CodecModel:
    """PCA codec: sample mean plus the top-``latent_dim`` right singular vectors."""
    x = _slice_matrix(slices)
    n, p = x.shape
    if latent_dim < 1 or latent_dim > min(n, p):
        raise ValidationError(f"latent dim {latent_dim} must be in [1, min(#slices={n}, pixels={p})]")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    basis = _fix_signs(vt[:latent_dim].T)
    return CodecModel("linear", slices[0].dims, latent_dim, {"mean_slice": mean, "basis": basis})


# --------------------------------------------------------------------- VAE


def _lrelu(a):
    return np.where(a > 0, a, LEAKY_SLOPE * a)


def _lrelu_grad(a):
    return np.where(a > 0, 1.0, LEAKY_SLOPE)


def init_vae_params(num_pixels: int, latent_dim: int, hidden: int, rng: np.random.Generator) -> dict:
    sizes = {
        "enc": [num_pixels, hidden, hidden, 2 * latent_dim],
        "dec": [latent_dim, hidden, hidden, num_pixels],
    }
    params = {}
    for part, dims in sizes.items():
        for i in range(3):
            bound = 1.0 / math.sqrt(dims[i])
            params[f"{part}_w{i + 1}"] = rng.uniform(-bound, bound, (dims[i], dims[i + 1]))
            params[f"{part}_b{i + 1}"] = np.zeros(dims[i + 1])
    return params


def _mlp_forward(params, prefix, x):
    """Three-layer MLP with leaky-ReLU hidden units; returns output and cache."""
    a1 = x @ params[f"{prefix}_w1"] + params[f"{prefix}_b1"]
    h1 = _lrelu(a1)
    a2 = h1 @ params[f"{prefix}_w2"] + params[f"{prefix}_b2"]
    h2 = _lrelu(a2)
    out = h2 @ params[f"{prefix}_w3"] + params[f"{prefix}_b3"]
    return out, (x, a1, h1, a2, h2)


def _mlp_backward(params, prefix, cache, dout, grads):
    x, a1, h1, a2, h2 = cache
    grads[f"{prefix}_w3"] = h2.T @ dout
    grads[f"{prefix}_b3"] = dout.sum(axis=0)
    da2 = (dout @ params[f"{prefix}_w3"].T) * _lrelu_grad(a2)
    grads[f"{prefix}_w2"] = h1.T @ da2
    grads[f"{prefix}_b2"] = da2.sum(axis=0)
    da1 = (da2 @ params[f"{prefix}_w2"].T) * _lrelu_grad(a1)
    grads[f"{prefix}_w1"] = x.T @ da1
    grads[f"{prefix}_b1"] = da1.sum(axis=0)
    return da1 @ params[f"{prefix}_w1"].T


def vae_loss(params: dict, x: np.ndarray, eps: np.ndarray, beta_kl: float, *, grad: bool = False):
    """Batch-mean VAE loss for slices ``x`` (n, H*W) and fixed noise ``eps`` (n, L).

    Returns ``(loss, mse)`` or, with ``grad=True``, ``(loss, mse, grads)`` where
    ``mse`` is the per-pixel reconstruction mean squared error.
    """
    n = x.shape[0]
    latent = eps.shape[1]
    enc_out, enc_cache = _mlp_forward(params, "enc", x)
    mu, logvar = enc_out[:, :latent], enc_out[:, latent:]
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    x_hat, dec_cache = _mlp_forward(params, "dec", z)
    resid = x_hat - x
    recon = 0.5 * np.sum(resid**2) / n
    var = sigma * sigma
    kl = 0.5 * np.sum(mu**2 + var - logvar - 1.0) / n
    loss = recon + beta_kl * kl
    mse = float(np.mean(resid**2))
    if not grad:
        return float(loss), mse

    grads = {}
    dz = _mlp_backward(params, "dec", dec_cache, resid / n, grads)
    dmu = dz + beta_kl * mu / n
    dlogvar = dz * eps * 0.5 * sigma + beta_kl * 0.5 * (var - 1.0) / n
    _mlp_backward(params, "enc", enc_cache, np.concatenate([dmu, dlogvar], axis=1), grads)
    return float(loss), mse, grads


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _split(n: int, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    if n < 2:
        return order, order
    n_val = min(n - 1, max(1, int(round(frac * n))))
    return order[n_val:], order[:n_val]


def train_vae_codec(slices: Sequence[Slice], latent_dim: int, cfg: TrainConfig | None = None):
    """Train a VAE per learning rate in the sweep; keep the best validation loss.

    No data augmentation is applied. Runs whose loss becomes non-finite are
    marked diverged and dropped from selection.

    Returns:
        ``(CodecModel, TrainReport)``.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if latent_dim < 1:
        raise ValidationError("latent dim must be >= 1")
    x = _slice_matrix(slices)
    n, p = x.shape
    train_idx, val_idx = _split(n, cfg.val_fraction, philox(cfg.seed))
    x_val = x[val_idx]
    eps_val = np.zeros((x_val.shape[0], latent_dim))

    entries, models = [], {}
    for lr in cfg.learning_rates:
        rng = philox(cfg.seed + 1)
        params = init_vae_params(p, latent_dim, cfg.hidden, rng)
        opt = Adam(params, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        entry = SweepEntry(lr)
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(cfg.epochs):
                order = train_idx[rng.permutation(train_idx.size)]
                total = 0.0
                for start in range(0, order.size, cfg.batch_size):
                    batch = x[order[start:start + cfg.batch_size]]
                    eps = rng.standard_normal((batch.shape[0], latent_dim))
                    loss, _, grads = vae_loss(params, batch, eps, cfg.beta_kl, grad=True)
                    if not math.isfinite(loss):
                        break
                    total += loss * batch.shape[0]
                    opt.step(params, grads)
                else:
                    val_loss, val_mse = vae_loss(params, x_val, eps_val, cfg.beta_kl)
                    entry.train_loss.append(total / order.size)
                    entry.val_loss.append(val_loss)
                    entry.val_mse.append(val_mse)
                    if math.isfinite(val_loss) and all(np.all(np.isfinite(v)) for v in params.values()):
                        continue
                entry.diverged = True
                break
        entries.append(entry)
        if not entry.diverged:
            models[lr] = params

    if not models:
        raise TrainingError("every learning rate in the sweep diverged")
    best = min(models, key=lambda lr: next(e for e in entries if e.learning_rate == lr).val_loss[-1])
    model = CodecModel("vae", slices[0].dims, latent_dim, models[best])
    return model, TrainReport(entries, best)


# ------------------------------------------------------------ encode/decode


def _check_slice(m: CodecModel, s: Slice) -> None:
    if s.dims != tuple(m.slice_dims):
        raise ValidationError(f"slice dims {s.dims} do not match codec dims {tuple(m.slice_dims)}")


def encode_slices(m: CodecModel, slices: Sequence[Slice], mode: str = "mean", rng=None) -> np.ndarray:
    """Encode a batch of slices into an ``(n, L)`` array.

    Rows are computed one at a time so a slice's code does not depend on the
    batch it arrives in (BLAS picks different kernels for different shapes).
    """
    for s in slices:
        _check_slice(m, s)
    x = np.stack([s.data.ravel() for s in slices]).astype(np.float64)
    if m.kind == "linear":
        centered = x - m.params["mean_slice"]
        return np.stack([row @ m.params["basis"] for row in centered])
    out = np.concatenate([_mlp_forward(m.params, "enc", x[i:i + 1])[0] for i in range(x.shape[0])])
    mu, logvar = out[:, : m.latent_dim], out[:, m.latent_dim:]
    if mode == "mean":
        return mu
    if mode != "sample":
        raise ValidationError(f"encode mode must be 'mean' or 'sample', got {mode!r}")
    if rng is None:
        raise ValidationError("sample mode needs an rng")
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)


def encode_slice(m: CodecModel, s: Slice, mode: str = "mean", rng=None) -> np.ndarray:
    return encode_slices(m, [s], mode, rng)[0]


def decode_latents(m: CodecModel, y: np.ndarray) -> np.ndarray:
    """Decode an ``(n, L)`` array into ``(n, H, W)`` float64 slices."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[1] != m.latent_dim:
        raise ValidationError(f"latent vector has length {y.shape[1]}, codec expects {m.latent_dim}")
    if m.kind == "linear":
        flat = np.stack([m.params["mean_slice"] + m.params["basis"] @ row for row in y])
    else:
        flat = np.concatenate([_mlp_forward(m.params, "dec", y[i:i + 1])[0] for i in range(y.shape[0])])
    return flat.reshape(-1, *m.slice_dims)


def decode_latent(m: CodecModel, y: np.ndarray) -> Slice:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValidationError("decode_latent takes a single latent vector")
    return Slice(decode_latents(m, y)[0])


def encode_volume(m: CodecModel, v: Volume, axis: int = 0, mode: str = "mean", rng=None) -> np.ndarray:
    """Encode every slice of ``v`` along ``axis``: a ``(T, L)`` latent sequence."""
    return encode_slices(m, extract_slices(v, check_axis(axis)), mode, rng)


def reconstruction_mse(m: CodecModel, slices: Sequence[Slice]) -> float:
    x = _slice_matrix(slices)
    rec = decode_latents(m, encode_slices(m, slices)).reshape(x.shape)
    return float(np.mean((rec - x) ** 2))


# -------------------------------------------------------------- file format

_CODEC_HEADER = struct.Struct("<4sHHI2I")


def save_codec(m: CodecModel, path) -> None:
    """Write an SCDC file; parameter arrays are stored as float32."""
    keys = LINEAR_KEYS if m.kind == "linear" else VAE_KEYS
    chunks = [_CODEC_HEADER.pack(CODEC_MAGIC, CODEC_VERSION, KIND_CODES[m.kind], m.latent_dim, *m.slice_dims)]
    for k in keys:
        arr = np.ascontiguousarray(m.params[k], dtype="<f4")
        chunks.append(struct.pack("<I", arr.size))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_codec(path) -> CodecModel:
    raw = Path(path).read_bytes()
    if len(raw) < _CODEC_HEADER.size or raw[:4] != CODEC_MAGIC:
        raise FormatError(f"{path}: not an SCDC codec file (bad magic)")
    _, version, kind_code, latent, h, w = _CODEC_HEADER.unpack_from(raw)
    kinds = {v: k for k, v in KIND_CODES.items()}
    if version != CODEC_VERSION or kind_code not in kinds:
        raise FormatError(f"{path}: unsupported version {version} / kind {kind_code}")
    kind = kinds[kind_code]
    offset = _CODEC_HEADER.size
    arrays = []
    keys = LINEAR_KEYS if kind == "linear" else VAE_KEYS
    for k in keys:
        if offset + 4 > len(raw):
            raise LengthError(f"{path}: truncated before array {k}")
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if offset + 4 * count > len(raw):
            raise LengthError(f"{path}: array {k} truncated")
        arrays.append(np.frombuffer(raw, "<f4", count, offset).astype(np.float64))
        offset += 4 * count
    if offset != len(raw):
        raise LengthError(f"{path}: {len(raw) - offset} trailing bytes")

    p = h * w
    params = {}
    if kind == "linear":
        params["mean_slice"], basis = arrays
        params["basis"] = basis.reshape(p, latent)
    else:
        hidden = arrays[1].size
        shapes = [(p, hidden), (hidden, hidden), (hidden, 2 * latent), (latent, hidden), (hidden, hidden), (hidden, p)]
        for i, key in enumerate(VAE_KEYS):
            arr = arrays[i]
            params[key] = arr.reshape(shapes[i // 2]) if i % 2 == 0 else arr
    return CodecModel(kind, (h, w), latent, params)
