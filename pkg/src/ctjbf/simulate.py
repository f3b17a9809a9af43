"""Synthetic phantom volumes and image-domain dose-reduction noise.

Phantoms are nested ellipsoids on a uniform background, lightly perturbed per
seed for variety. Dose reduction is modelled directly in the image domain:
zero-mean correlated Gaussian noise whose standard deviation scales as
1 / sqrt(dose_fraction), matching quantum-noise behaviour. The noise field is
blurred for reconstruction-kernel-like correlation, then recentred and
rescaled so its sample mean is exactly zero and its sample std exactly the
target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import domain_error
from .volume import CtVolume

Ellipsoid = tuple[tuple[float, float, float], tuple[float, float, float], float]


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry recipe: ellipsoids as (center_xyz, semi_axes_xyz, hu_value).

    Centers and semi-axes are in voxel units. Later ellipsoids overwrite
    earlier ones, so nested structures list the innermost last.
    """

    seed: int
    dims: tuple[int, int, int]
    ellipsoids: tuple[Ellipsoid, ...]
    background: float = -1000.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.ellipsoids) == 0:
            raise domain_error("simulate", "phantom needs at least one ellipsoid")
        for _, axes, _ in self.ellipsoids:
            if min(axes) <= 0:
                raise domain_error("simulate", f"semi-axes must be > 0, got {axes}")


@dataclass(frozen=True)
class DoseModel:
    """Noise model: std at the simulated dose is base_sigma / sqrt(dose_fraction)."""

    dose_fraction: float
    base_sigma: float = 15.0
    correlation_sigma: float = 1.2

    def __post_init__(self):
        if not 0.0 < self.dose_fraction <= 1.0:
            raise domain_error(
                "simulate", f"dose_fraction must be in (0, 1], got {self.dose_fraction}"
            )
        if self.base_sigma < 0:
            raise domain_error("simulate", f"base_sigma must be >= 0, got {self.base_sigma}")

    @property
    def noise_sigma(self) -> float:
        return self.base_sigma / np.sqrt(self.dose_fraction)


def make_phantom(spec: PhantomSpec) -> CtVolume:
    """Rasterize the spec; the seed jitters centers and axes by at most 5%."""
    nx, ny, nz = spec.dims
    rng = np.random.default_rng(spec.seed)
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    vol = np.full((nz, ny, nx), float(spec.background))
    for center, axes, value in spec.ellipsoids:
        jitter = rng.uniform(-0.05, 0.05, size=6)
        cx = center[0] + jitter[0] * axes[0]
        cy = center[1] + jitter[1] * axes[1]
        cz = center[2] + jitter[2] * axes[2]
        ax = axes[0] * (1.0 + jitter[3])
        ay = axes[1] * (1.0 + jitter[4])
        az = axes[2] * (1.0 + jitter[5])
        inside = (
            ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2
        ) <= 1.0
        vol[inside] = float(value)
    return CtVolume(spec.dims, spec.spacing, vol)


def simulate_low_dose(vol: CtVolume, model: DoseModel, seed: int) -> CtVolume:
    """Add correlated Gaussian noise with std base_sigma / sqrt(dose_fraction)."""
    sigma = model.noise_sigma
    if sigma == 0.0:
        return vol
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(vol.data.shape)
    if model.correlation_sigma > 0:
        noise = ndimage.gaussian_filter(noise, model.correlation_sigma)
    noise -= noise.mean()
    noise *= sigma / noise.std()
    return vol.with_data(vol.data + noise)


def body_phantom_spec(
    seed: int, dims: tuple[int, int, int] = (112, 112, 12)
) -> PhantomSpec:
    """A simple abdomen-like phantom: soft-tissue body, organs, bone, lesions.

    The structure menu is fixed; per-seed variation comes from make_phantom's
    jitter plus seeded organ HU offsets, so every phantom is distinct yet
    anatomically comparable.
    """
    nx, ny, nz = dims
    rng = np.random.default_rng(seed ^ 0x5EED)
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    body = ((cx, cy, cz), (0.44 * nx, 0.40 * ny, 2.0 * nz), 40.0)
    organs: list[Ellipsoid] = [body]
    organ_hus = rng.uniform(-80.0, 120.0, size=4)
    positions = [(-0.18, -0.12), (0.20, -0.10), (-0.10, 0.16), (0.16, 0.18)]
    for (ox, oy), hu in zip(positions, organ_hus):
        organs.append(
            (
                (cx + ox * nx, cy + oy * ny, cz),
                (0.11 * nx, 0.09 * ny, 0.9 * nz),
                float(hu),
            )
        )
    # spine-like bone insert and two small low-contrast lesions
    organs.append(((cx, cy + 0.28 * ny, cz), (0.06 * nx, 0.05 * ny, 2.0 * nz), 400.0))
    lesion_hus = rng.uniform(-40.0, 60.0, size=2)
    organs.append(
        ((cx - 0.05 * nx, cy - 0.02 * ny, cz), (0.035 * nx, 0.03 * ny, 0.5 * nz), float(lesion_hus[0]))
    )
    organs.append(
        ((cx + 0.08 * nx, cy + 0.05 * ny, cz), (0.025 * nx, 0.025 * ny, 0.4 * nz), float(lesion_hus[1]))
    )
    return PhantomSpec(seed=seed, dims=dims, ellipsoids=tuple(organs))
