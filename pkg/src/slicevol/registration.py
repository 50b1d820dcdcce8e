"""12-parameter affine registration and warping of volumes and label maps.

A transform maps fixed-grid voxel coordinates ``p`` to moving-grid
coordinates ``A (p - c_fixed) + c_moving + t``, where the centres are the
grid midpoints ``(dims - 1) / 2``. Warping pulls moving intensities back onto
the fixed grid; samples outside the moving grid are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .volume import LabelMap, Volume, trilinear_sample


@dataclass(frozen=True, eq=False)
class AffineTransform:
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        a = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(t))):
            raise ValidationError("affine parameters must be finite")
        if np.linalg.det(a) <= 0:
            raise ValidationError("affine matrix must have positive determinant")
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls()

    def apply(self, points: np.ndarray, fixed_dims, moving_dims) -> np.ndarray:
        """Map ``(3, n)`` fixed-grid coordinates into the moving grid."""
        cf = (np.asarray(fixed_dims, dtype=np.float64) - 1) / 2
        cm = (np.asarray(moving_dims, dtype=np.float64) - 1) / 2
        return self.matrix @ (points - cf[:, None]) + (cm + self.translation)[:, None]

    def inverse(self) -> AffineTransform:
        """Inverse for equal fixed and moving dims."""
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.translation)


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Transform equal to warping by ``outer`` and then by ``inner`` (equal dims).

    The combined pull-back map is ``outer(inner(p))``.
    """
    return AffineTransform(outer.matrix @ inner.matrix, outer.matrix @ inner.translation + outer.translation)


def _grid(dims) -> np.ndarray:
    axes = [np.arange(d, dtype=np.float64) for d in dims]
    return np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")])


def warp_volume(v: Volume, t: AffineTransform, out_dims=None) -> Volume:
    """Trilinear pull-back of ``v`` onto an ``out_dims`` grid, zero outside."""
    out_dims = tuple(out_dims or v.dims)
    coords = t.apply(_grid(out_dims), out_dims, v.dims)
    return Volume(trilinear_sample(v.data, coords).reshape(out_dims), v.spacing)


def warp_labels(m: LabelMap, t: AffineTransform, out_dims=None) -> LabelMap:
    """Nearest-neighbour pull-back of a label map; outside samples become 0."""
    out_dims = tuple(out_dims or m.dims)
    coords = np.rint(t.apply(_grid(out_dims), out_dims, m.dims)).astype(np.int64)
    inside = np.all((coords >= 0) & (coords < np.array(m.dims)[:, None]), axis=0)
    out = np.zeros(coords.shape[1], dtype=np.int64)
    c = coords[:, inside]
    out[inside] = m.labels[c[0], c[1], c[2]]
    return LabelMap(out.reshape(out_dims), m.num_classes)


# ------------------------------------------------------------- objective


MIN_LEVEL_SIZE = 16


@dataclass
class RegConfig:
    pyramid_levels: int = 3
    iters_per_level: int = 200
    step_size: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    objective: str = "ncc"
    convergence_tol: float = 1e-6
    convergence_window: int = 10

    def validate(self) -> None:
        if self.pyramid_levels < 1 or self.iters_per_level < 1:
            raise ValidationError("pyramid_levels and iters_per_level must be >= 1")
        if self.objective not in ("ncc", "ssd"):
            raise ValidationError(f"unknown registration objective {self.objective!r}")
        if self.step_size <= 0:
            raise ValidationError("step_size must be > 0")


def _overlap_weights(coords: np.ndarray, dims, grad: bool):
    """Per-sample weight 1 inside the moving grid, ramping to 0 one voxel outside.

    Matches the support of the zero-padded trilinear interpolant and is
    continuous in the coordinates.
    """
    ups = np.asarray(dims, dtype=np.float64)[:, None] - coords  # d - u
    lows = coords + 1.0
    per_axis = np.clip(np.minimum(lows, ups), 0.0, 1.0)
    weight = np.prod(per_axis, axis=0)
    if not grad:
        return weight, None
    slope = np.where((lows > 0) & (lows < 1) & (lows <= ups), 1.0, 0.0)
    slope = np.where((ups > 0) & (ups < 1) & (ups < lows), -1.0, slope)
    dweight = np.empty_like(coords)
    for i in range(3):
        others = np.prod(np.delete(per_axis, i, axis=0), axis=0)
        dweight[i] = slope[i] * others
    return weight, dweight


class _Problem:
    """Objective over 12 normalized parameters for one pyramid level.

    Parameters are the nine matrix entries (row-major) followed by the
    translation divided by ``scale`` (half the largest fixed dimension), so a
    unit change in any parameter moves boundary voxels by a similar amount.
    Fixed voxels are weighted by how far their image lies inside the moving
    grid, so content cut off by the grid border does not bias the optimum.
    """

    def __init__(self, moving: np.ndarray, fixed: np.ndarray, kind: str, cf, cm):
        self.moving = moving
        self.fixed = fixed.ravel()
        self.kind = kind
        self.rel = _grid(fixed.shape) - np.asarray(cf, dtype=np.float64)[:, None]
        self.cm = np.asarray(cm, dtype=np.float64)
        self.scale = max(fixed.shape) / 2.0

    def unpack(self, theta):
        return theta[:9].reshape(3, 3), theta[9:] * self.scale

    def pack(self, a, t):
        return np.concatenate([np.ravel(a), np.asarray(t) / self.scale])

    def __call__(self, theta, grad: bool = True):
        a, t = self.unpack(theta)
        coords = a @ self.rel + (self.cm + t)[:, None]
        if grad:
            w, g = trilinear_sample(self.moving, coords, grad=True)
        else:
            w = trilinear_sample(self.moving, coords)
        m, dm = _overlap_weights(coords, self.moving.shape, grad)
        total = m.sum()
        undefined = (math.inf, None) if grad else math.inf
        if total <= 0:
            return undefined
        f = self.fixed
        if self.kind == "ssd":
            r = w - f
            value = float(m @ (r * r) / total)
            dw = 2.0 * m * r / total
            dmv = (r * r - value) / total
        else:
            fc = f - (m @ f) / total
            wc = w - (m @ w) / total
            vf = float(m @ (fc * fc))
            vw = float(m @ (wc * wc))
            if vf <= 0.0 or vw <= 0.0:
                return undefined
            root = math.sqrt(vf * vw)
            ncc = float(m @ (fc * wc)) / root
            value = -ncc
            dw = -(m * fc / root - ncc * m * wc / vw)
            dmv = -(fc * wc / root - 0.5 * ncc * (fc * fc / vf + wc * wc / vw))
        if not grad:
            return value
        gq = g * dw + dm * dmv  # (3, n): d value / d coords
        da = gq @ self.rel.T
        dt = gq.sum(axis=1) * self.scale
        return value, np.concatenate([da.ravel(), dt])


def registration_objective(moving: Volume, fixed: Volume, t: AffineTransform, kind: str = "ncc", grad: bool = False):
    """Overlap-weighted objective (negative NCC or mean SSD) at full resolution.

    The gradient is with respect to ``(matrix entries row-major, translation)``.
    """
    problem = _Problem(moving.data.astype(np.float64), fixed.data.astype(np.float64), kind,
                       (np.array(fixed.dims) - 1) / 2, (np.array(moving.dims) - 1) / 2)
    problem.scale = 1.0
    theta = problem.pack(t.matrix, t.translation)
    return problem(theta, grad=grad)


def _pool2(a: np.ndarray) -> np.ndarray:
    d, h, w = (max(n // 2, 1) * 2 if n > 1 else 1 for n in a.shape)
    a = a[:d, :h, :w]
    fd, fh, fw = (2 if n > 1 else 1 for n in a.shape)
    return a.reshape(d // fd, fd, h // fh, fh, w // fw, fw).mean(axis=(1, 3, 5))


def _pyramid(a: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [a]
    for _ in range(levels - 1):
        out.append(_pool2(out[-1]))
    return out


def _level_center(dims_full, level: int) -> np.ndarray:
    """Centre of the full-resolution grid expressed in level coordinates.

    Level voxel ``i`` covers fine voxels ``2^L i .. 2^L i + 2^L - 1``.
    """
    f = 2.0**level
    return ((np.asarray(dims_full, dtype=np.float64) - 1) / 2 - (f - 1) / 2) / f


@dataclass
class RegistrationResult:
    transform: AffineTransform
    objective: float
    history: list


def register_affine(moving: Volume, fixed: Volume, cfg: RegConfig | None = None) -> RegistrationResult:
    """Coarse-to-fine affine registration of ``moving`` onto ``fixed``.

    Each level runs Adam on the normalized parameters; a step that fails to
    improve the objective (or flips orientation) is rejected and the step
    size halved, so the accepted objective sequence is non-increasing.
    Accepted steps let the step size grow back towards ``step_size``.
    """
    cfg = cfg or RegConfig()
    cfg.validate()
    mov = moving.data.astype(np.float64)
    fix = fixed.data.astype(np.float64)
    if not (np.all(np.isfinite(mov)) and np.all(np.isfinite(fix))):
        raise ValidationError("registration inputs must be finite")
    if cfg.objective == "ncc" and (np.ptp(mov) == 0 or np.ptp(fix) == 0):
        raise ValidationError("NCC is undefined for a constant image; use objective=ssd")

    # coarsest level keeps at least MIN_LEVEL_SIZE voxels per axis
    smallest = min(min(moving.dims), min(fixed.dims))
    levels = max(1, min(cfg.pyramid_levels, 1 + int(math.log2(max(1, smallest // MIN_LEVEL_SIZE)))))
    mov_pyr, fix_pyr = _pyramid(mov, levels), _pyramid(fix, levels)
    a, t = np.eye(3), np.zeros(3)
    history = []
    for level in reversed(range(levels)):
        f = 2.0**level
        problem = _Problem(mov_pyr[level], fix_pyr[level], cfg.objective,
                           _level_center(fixed.dims, level), _level_center(moving.dims, level))
        theta = problem.pack(a, t / f)
        value, g = problem(theta)
        if g is None:
            raise ValidationError("objective undefined at the initial transform")
        m1, m2 = np.zeros(12), np.zeros(12)
        lr = cfg.step_size
        recent = [value]
        for it in range(1, cfg.iters_per_level + 1):
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * g * g
            step = lr * (m1 / (1 - cfg.beta1**it)) / (np.sqrt(m2 / (1 - cfg.beta2**it)) + 1e-12)
            cand = theta - step
            ok = np.linalg.det(cand[:9].reshape(3, 3)) > 0
            if ok:
                new_value, new_g = problem(cand)
                ok = new_g is not None and new_value <= value
            if ok:
                theta, value, g = cand, new_value, new_g
                lr = min(cfg.step_size, lr * 1.25)
            else:
                lr *= 0.5
            recent.append(value)
            if len(recent) > cfg.convergence_window:
                old = recent[-1 - cfg.convergence_window]
                if abs(old - value) <= cfg.convergence_tol * max(abs(old), 1e-12):
                    break
            if lr < 1e-8:
                break
        history.append(value)
        a_l, t_l = problem.unpack(theta)
        a, t = a_l, t_l * f

    transform = AffineTransform(a, t)
    final = registration_objective(moving, fixed, transform, cfg.objective)
    return RegistrationResult(transform, float(final), history)


# -------------------------------------------------------------- file format


def save_transform(t: AffineTransform, path) -> None:
    values = list(t.matrix.ravel()) + list(t.translation)
    Path(path).write_text("SAFF 1\n" + " ".join(repr(float(v)) for v in values) + "\n")


def load_transform(path) -> AffineTransform:
    lines = Path(path).read_text().split("\n", 1)
    if lines[0].strip() != "SAFF 1":
        raise FormatError(f"{path}: missing 'SAFF 1' header")
    try:
        values = [float(tok) for tok in (lines[1] if len(lines) > 1 else "").split()]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(values) != 12:
        raise FormatError(f"{path}: expected 12 numbers, found {len(values)}")
    return AffineTransform(np.array(values[:9]).reshape(3, 3), values[9:])
