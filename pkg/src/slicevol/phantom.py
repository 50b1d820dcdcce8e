"""Synthetic nested-ellipsoid brain phantoms with ground-truth labels.

All randomness comes from numpy's Philox counter-based generator seeded with
the phantom seed, so a given :class:`PhantomParams` always yields the same
bits. Axis 0 plays the role of the coronal slicing direction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .volume import LabelMap, Volume

# semi-axes of the outer ellipsoid as a fraction of each dimension; axis 0
# overshoots the grid so no slice is a near-empty polar cap
OUTER_SEMI_AXES = (0.55, 0.45, 0.42)
NUM_DEFORM_MODES = 8
DEFORM_COEF_SCALE = 0.5
SHELL_SHIFT = 0.5


def philox(seed: int) -> np.random.Generator:
    """The toolkit's reproducible generator: Philox4x64 keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (32, 32, 32)
    num_foreground_classes: int = 4
    class_mean_intensities: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.1
    deform_amplitude: float = 0.08
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def num_classes(self) -> int:
        return self.num_foreground_classes + 1

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError(f"phantom dims must be three positive integers, got {self.dims}")
        k = self.num_foreground_classes
        means = np.asarray(self.class_mean_intensities, dtype=float)
        if k < 1 or means.shape != (k,):
            raise ValidationError(f"need {k} class means, got {len(means)}")
        if np.any(means <= 0) or np.any(means > 1):
            raise ValidationError("class means must lie in (0, 1]")
        if self.noise_sigma < 0 or self.bias_amplitude < 0 or self.deform_amplitude < 0:
            raise ValidationError("noise_sigma, bias_amplitude and deform_amplitude must be >= 0")
        gaps = np.diff(np.concatenate([[0.0], means]))
        if np.any(gaps <= 4 * self.noise_sigma):
            raise ValidationError("class means must be strictly increasing and separated by more than 4*noise_sigma")
        if self.deform_amplitude >= 0.5:
            raise ValidationError("deform_amplitude must be < 0.5")
        min_semi = min(f * d for f, d in zip(OUTER_SEMI_AXES, self.dims))
        thickness = min_semi * (1.0 - self.deform_amplitude) / k
        if thickness < 1.0:
            raise ValidationError(
                f"dims {self.dims} too small for {k} nested shells (thinnest shell {thickness:.2f} voxels)"
            )


def _angular_modes(nz, ny, nx):
    """The eight lowest sinusoidal modes in polar/azimuthal angle."""
    theta = np.arccos(np.clip(nz, -1.0, 1.0))
    phi = np.arctan2(ny, nx)
    st = np.sin(theta)
    return np.stack(
        [
            np.ones_like(theta),
            np.cos(theta),
            st * np.cos(phi),
            st * np.sin(phi),
            np.cos(2 * theta),
            np.sin(2 * theta) * np.cos(phi),
            np.sin(2 * theta) * np.sin(phi),
            st**2 * np.cos(2 * phi),
        ]
    )


def generate_phantom(params: PhantomParams) -> tuple[Volume, LabelMap]:
    """Generate one phantom volume and its noise-free label map."""
    params.validate()
    rng = philox(params.seed)
    # draw order is part of the format: deformation, bias, noise
    deform_coef = rng.normal(0.0, DEFORM_COEF_SCALE, NUM_DEFORM_MODES)
    bias_coef = rng.uniform(-1.0, 1.0, 3)
    bias_phase = rng.uniform(0.0, 2 * np.pi, 3)

    dims = params.dims
    k = params.num_foreground_classes
    center = [(d - 1) / 2.0 for d in dims]
    semi = [f * d for f, d in zip(OUTER_SEMI_AXES, dims)]
    z, y, x = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    qy, qx = (y - center[1]) / semi[1], (x - center[2]) / semi[2]

    # shell c (1 = outermost) has normalized radius 1 - (c-1)/K and its centre
    # moved along axis 0, so slices differ in content along the slicing axis
    labels = np.zeros(dims, dtype=np.int64)
    for cls in range(1, k + 1):
        offset = SHELL_SHIFT * (cls - 1) / k
        qz = (z - center[0]) / semi[0] - offset
        rho = np.sqrt(qz**2 + qy**2 + qx**2)
        if params.deform_amplitude > 0:
            safe = np.where(rho > 0, rho, 1.0)
            f = np.tensordot(deform_coef, _angular_modes(qz / safe, qy / safe, qx / safe), axes=1)
            rho = rho / (1.0 + params.deform_amplitude * np.tanh(f))
        labels[rho < 1.0 - (cls - 1) / k] = cls

    means = np.concatenate([[0.0], np.asarray(params.class_mean_intensities, dtype=np.float64)])
    intensity = means[labels]
    if params.bias_amplitude > 0:
        norm = [(z - center[0]) / max(center[0], 1.0), (y - center[1]) / max(center[1], 1.0), (x - center[2]) / max(center[2], 1.0)]
        weights = bias_coef / max(np.sum(np.abs(bias_coef)), 1e-12)
        field = sum(w * np.sin(0.5 * np.pi * q + p) for w, q, p in zip(weights, norm, bias_phase))
        intensity = intensity * (1.0 + params.bias_amplitude * field)
    if params.noise_sigma > 0:
        # background stays exactly zero, as in skull-stripped scans
        noise = rng.normal(0.0, params.noise_sigma, dims)
        intensity = np.where(labels > 0, intensity + noise, 0.0)

    return Volume(intensity, params.spacing), LabelMap(labels, params.num_classes)


def generate_cohort(base: PhantomParams, count: int, threads: int = 1) -> list[tuple[Volume, LabelMap]]:
    """Phantoms with seeds ``base.seed + i`` for ``i`` in ``range(count)``."""
    if count < 1:
        raise ValidationError(f"cohort count must be >= 1, got {count}")
    base.validate()
    items = [replace(base, seed=base.seed + i) for i in range(count)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(generate_phantom, items))
    return [generate_phantom(p) for p in items]
