"""3D joint bilateral filtering over a 9x9x5 neighborhood.

The filter output at voxel x is the weighted mean of the noisy input over the
neighborhood, with spatial weights from the 3D voxel offset and range weights
from guidance-image differences. Both weight factors are Gaussians; their
1/(2 sigma^2) prefactors cancel between numerator and denominator, so the
implementation uses bare exponentials (see gaussian_weight for the literal
normalized form used in tests).

Boundary voxels replicate the volume edge: neighbor indices are clamped to
the volume. With a ParamMap, the sigma values at the output voxel apply to
that voxel's entire neighborhood sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import domain_error, shape_error
from .volume import CtVolume

DEFAULT_KERNEL = (9, 9, 5)

# spatial weight tables keyed by (kernel_dims, quantized sigma_s)
_SIGMA_QUANT = 1e-3
_spatial_cache: dict[tuple[tuple[int, int, int], int], np.ndarray] = {}


@dataclass(frozen=True)
class JbfParams:
    """Scalar smoothing parameters: sigma_s in voxels, sigma_i in HU."""

    sigma_s: float
    sigma_i: float
    kernel_dims: tuple[int, int, int] = DEFAULT_KERNEL

    def __post_init__(self):
        if self.sigma_s <= 0 or self.sigma_i <= 0:
            raise domain_error(
                "filter", f"sigmas must be > 0, got ({self.sigma_s}, {self.sigma_i})"
            )
        _check_kernel(self.kernel_dims)


@dataclass(frozen=True)
class ParamMap:
    """Per-voxel sigma fields co-registered with the target volume.

    Arrays are shaped like CtVolume.data, (nz, ny, nx).
    """

    sigma_s: np.ndarray = field(repr=False)
    sigma_i: np.ndarray = field(repr=False)
    kernel_dims: tuple[int, int, int] = DEFAULT_KERNEL

    def __post_init__(self):
        ss = np.asarray(self.sigma_s, dtype=np.float64)
        si = np.asarray(self.sigma_i, dtype=np.float64)
        if ss.shape != si.shape:
            raise shape_error("filter", f"sigma maps disagree: {ss.shape} vs {si.shape}")
        if not (ss > 0).all() or not (si > 0).all():
            raise domain_error("filter", "sigma maps must be strictly positive")
        object.__setattr__(self, "sigma_s", ss)
        object.__setattr__(self, "sigma_i", si)
        _check_kernel(self.kernel_dims)


def gaussian_weight(x: float, sigma: float) -> float:
    """Normalized Gaussian operator exp(-x^2 / (2 sigma^2)) / (2 sigma^2)."""
    if sigma <= 0:
        raise domain_error("filter", f"sigma must be > 0, got {sigma}")
    return math.exp(-(x * x) / (2.0 * sigma * sigma)) / (2.0 * sigma * sigma)


def jbf_apply(
    noisy: CtVolume, guidance: CtVolume, params: JbfParams | ParamMap
) -> CtVolume:
    """Filter the full volume; returns a new CtVolume."""
    if noisy.dims != guidance.dims:
        raise shape_error(
            "filter", f"noisy dims {noisy.dims} != guidance dims {guidance.dims}"
        )
    if isinstance(params, ParamMap) and params.sigma_s.shape != noisy.data.shape:
        raise shape_error(
            "filter",
            f"param map shape {params.sigma_s.shape} != volume shape {noisy.data.shape}",
        )
    out = jbf_apply_region(noisy, guidance, params, (0, 0, 0), noisy.dims)
    return noisy.with_data(out)


def jbf_apply_region(
    noisy: CtVolume,
    guidance: CtVolume,
    params: JbfParams | ParamMap,
    origin: tuple[int, int, int],
    size: tuple[int, int, int],
) -> np.ndarray:
    """Filter only the box [origin, origin+size); returns (sz, sy, sx) values.

    The result is identical to the corresponding crop of jbf_apply: the box is
    inflated by the kernel radii to gather real neighbors, and edge replication
    is applied only where the inflated box leaves the volume.
    """
    x0, y0, z0 = origin
    sx, sy, sz = size
    nx, ny, nz = noisy.dims
    if noisy.dims != guidance.dims:
        raise shape_error(
            "filter", f"noisy dims {noisy.dims} != guidance dims {guidance.dims}"
        )
    if min(sx, sy, sz) < 1 or x0 < 0 or y0 < 0 or z0 < 0 or x0 + sx > nx or y0 + sy > ny or z0 + sz > nz:
        raise shape_error(
            "filter", f"region origin={origin} size={size} outside volume dims {noisy.dims}"
        )
    kx, ky, kz = params.kernel_dims
    rx, ry, rz = kx // 2, ky // 2, kz // 2

    lox, hix = max(x0 - rx, 0), min(x0 + sx + rx, nx)
    loy, hiy = max(y0 - ry, 0), min(y0 + sy + ry, ny)
    loz, hiz = max(z0 - rz, 0), min(z0 + sz + rz, nz)
    pad = (
        (rz - (z0 - loz), rz - (hiz - (z0 + sz))),
        (ry - (y0 - loy), ry - (hiy - (y0 + sy))),
        (rx - (x0 - lox), rx - (hix - (x0 + sx))),
    )
    npad = np.pad(noisy.data[loz:hiz, loy:hiy, lox:hix], pad, mode="edge")
    gpad = np.pad(guidance.data[loz:hiz, loy:hiy, lox:hix], pad, mode="edge")
    gc = guidance.data[z0 : z0 + sz, y0 : y0 + sy, x0 : x0 + sx]

    if isinstance(params, ParamMap):
        ss = params.sigma_s[z0 : z0 + sz, y0 : y0 + sy, x0 : x0 + sx]
        si = params.sigma_i[z0 : z0 + sz, y0 : y0 + sy, x0 : x0 + sx]
        return _jbf_sum_mapped(npad, gpad, gc, ss, si, params.kernel_dims)
    return _jbf_sum_scalar(npad, gpad, gc, params)


def gaussian_blur(
    vol: CtVolume, sigma_s: float, kernel_dims: tuple[int, int, int] = DEFAULT_KERNEL
) -> CtVolume:
    """Spatial-only smoothing: normalized truncated Gaussian, edge replication.

    Serves as the sigma_i -> infinity limit of the joint bilateral filter and
    as the correlation kernel oracle; backed by scipy's correlate loop rather
    than the filter's own shift-accumulate path.
    """
    if sigma_s <= 0:
        raise domain_error("filter", f"sigma_s must be > 0, got {sigma_s}")
    _check_kernel(kernel_dims)
    kx, ky, kz = kernel_dims
    rx, ry, rz = kx // 2, ky // 2, kz // 2
    zz, yy, xx = np.meshgrid(
        np.arange(-rz, rz + 1), np.arange(-ry, ry + 1), np.arange(-rx, rx + 1),
        indexing="ij",
    )
    kernel = np.exp(-(xx**2 + yy**2 + zz**2) / (2.0 * sigma_s**2))
    kernel /= kernel.sum()
    out = ndimage.correlate(vol.data, kernel, mode="nearest")
    return vol.with_data(out)


def spatial_weights(kernel_dims: tuple[int, int, int], sigma_s: float) -> np.ndarray:
    """Unnormalized spatial weights per kernel offset, raster (dz, dy, dx) order.

    Tables are cached keyed by the kernel and sigma_s quantized to 1e-3.
    """
    key = (kernel_dims, int(round(sigma_s / _SIGMA_QUANT)))
    table = _spatial_cache.get(key)
    if table is None:
        d2 = _offset_sq(kernel_dims)
        qs = key[1] * _SIGMA_QUANT
        table = np.exp(-d2 / (2.0 * qs * qs))
        _spatial_cache[key] = table
    return table


def _check_kernel(kernel_dims):
    kx, ky, kz = kernel_dims
    if min(kx, ky, kz) < 1 or kx % 2 == 0 or ky % 2 == 0 or kz % 2 == 0:
        raise domain_error(
            "filter", f"kernel dims must be odd and >= 1, got {kernel_dims}"
        )


def _offset_sq(kernel_dims: tuple[int, int, int]) -> np.ndarray:
    """Squared Euclidean voxel offsets in raster (dz, dy, dx) order."""
    kx, ky, kz = kernel_dims
    rx, ry, rz = kx // 2, ky // 2, kz // 2
    zz, yy, xx = np.meshgrid(
        np.arange(-rz, rz + 1), np.arange(-ry, ry + 1), np.arange(-rx, rx + 1),
        indexing="ij",
    )
    return (xx**2 + yy**2 + zz**2).astype(np.float64).ravel()


def _jbf_sum_scalar(npad, gpad, gc, params: JbfParams):
    kx, ky, kz = params.kernel_dims
    sz, sy, sx = gc.shape
    ws = spatial_weights(params.kernel_dims, params.sigma_s)
    inv2si2 = 1.0 / (2.0 * params.sigma_i * params.sigma_i)
    num = np.zeros_like(gc)
    den = np.zeros_like(gc)
    buf = np.empty_like(gc)
    idx = 0
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                gs = gpad[dz : dz + sz, dy : dy + sy, dx : dx + sx]
                np.subtract(gs, gc, out=buf)
                np.multiply(buf, buf, out=buf)
                buf *= -inv2si2
                np.exp(buf, out=buf)
                buf *= ws[idx]
                den += buf
                buf *= npad[dz : dz + sz, dy : dy + sy, dx : dx + sx]
                num += buf
                idx += 1
    return num / den


def _jbf_sum_mapped(npad, gpad, gc, sigma_s, sigma_i, kernel_dims):
    kx, ky, kz = kernel_dims
    sz, sy, sx = gc.shape
    d2 = _offset_sq(kernel_dims)
    inv2ss2 = 1.0 / (2.0 * sigma_s * sigma_s)
    inv2si2 = 1.0 / (2.0 * sigma_i * sigma_i)
    num = np.zeros_like(gc)
    den = np.zeros_like(gc)
    buf = np.empty_like(gc)
    idx = 0
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                gs = gpad[dz : dz + sz, dy : dy + sy, dx : dx + sx]
                np.subtract(gs, gc, out=buf)
                np.multiply(buf, buf, out=buf)
                buf *= inv2si2
                buf += d2[idx] * inv2ss2
                np.negative(buf, out=buf)
                np.exp(buf, out=buf)
                den += buf
                buf *= npad[dz : dz + sz, dy : dy + sy, dx : dx + sx]
                num += buf
                idx += 1
    return num / den
