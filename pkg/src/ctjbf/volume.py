"""Volumetric CT image type, file I/O, patch extraction and display windowing.

A CtVolume stores Hounsfield-unit voxels z-major (numpy shape (nz, ny, nx),
x fastest). On disk the payload is little-endian float32 behind a short ASCII
header; in memory values are kept as float64 so downstream filtering and
gradient math run at full precision.

CTVOL file layout::

    CTVOL1\n
    dims <nx> <ny> <nz>\n
    spacing <sx> <sy> <sz>\n
    data float32 le\n
    <nx*ny*nz little-endian float32, x fastest, then y, then z>
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FormatError, TruncationError, domain_error, shape_error

MAGIC = b"CTVOL1\n"


@dataclass(frozen=True)
class CtVolume:
    """3D scalar field in HU with voxel spacing metadata.

    data is shaped (nz, ny, nx); dims is the (nx, ny, nz) voxel count tuple.
    Instances are treated as immutable: operations return new volumes.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 1:
            raise shape_error("volume", f"dims must be >= 1, got {self.dims}")
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.size != nx * ny * nz:
            raise shape_error(
                "volume",
                f"data has {arr.size} values, dims {self.dims} need {nx * ny * nz}",
            )
        arr = arr.reshape(nz, ny, nx)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def nx(self) -> int:
        return self.dims[0]

    @property
    def ny(self) -> int:
        return self.dims[1]

    @property
    def nz(self) -> int:
        return self.dims[2]

    def with_data(self, data: np.ndarray) -> "CtVolume":
        """New volume with the same geometry and different voxel values."""
        return CtVolume(self.dims, self.spacing, data)


@dataclass(frozen=True)
class Patch3d:
    """A sub-block of a parent volume; data shaped (pz, py, px)."""

    origin: tuple[int, int, int]
    dims: tuple[int, int, int]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        px, py, pz = self.dims
        arr = np.asarray(self.data, dtype=np.float64).reshape(pz, py, px)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)


def load_volume(path: str | os.PathLike) -> CtVolume:
    """Read a CTVOL1 file.

    Raises FormatError on a bad magic/header and TruncationError when the
    payload holds fewer voxels than the header promises.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path} (want CTVOL1)")
        dims = _read_header_line(fh, "dims", path, int, 3)
        spacing = _read_header_line(fh, "spacing", path, float, 3)
        data_line = fh.readline().decode("ascii", "replace").split()
        if data_line != ["data", "float32", "le"]:
            raise FormatError(f"bad data declaration {data_line} in {path}")
        count = dims[0] * dims[1] * dims[2]
        payload = fh.read(4 * count)
        if len(payload) < 4 * count:
            raise TruncationError(
                f"{path}: payload has {len(payload) // 4} voxels, header promises {count}"
            )
    values = np.frombuffer(payload, dtype="<f4", count=count)
    return CtVolume(tuple(dims), tuple(spacing), values.astype(np.float64))


def save_volume(vol: CtVolume, path: str | os.PathLike) -> None:
    """Write a CTVOL1 file; values are stored as little-endian float32."""
    if not np.isfinite(vol.data).all():
        raise domain_error("volume", f"refusing to write non-finite voxels to {path}")
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    header = MAGIC + (
        f"dims {nx} {ny} {nz}\nspacing {sx:.17g} {sy:.17g} {sz:.17g}\ndata float32 le\n"
    ).encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(vol.data.astype("<f4").tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def extract_patches(
    vol: CtVolume, size: Sequence[int], stride: Sequence[int] | None = None
) -> list[Patch3d]:
    """Slide a (px, py, pz) window over the volume in raster order.

    With stride == size the patches tile the covered region without overlap;
    trailing regions that do not fit a full window are dropped. A window
    larger than the volume yields an empty list.
    """
    px, py, pz = (int(s) for s in size)
    if stride is None:
        stride = (px, py, pz)
    gx, gy, gz = (int(s) for s in stride)
    if min(gx, gy, gz) < 1:
        raise domain_error("volume", f"stride must be >= 1, got {tuple(stride)}")
    if min(px, py, pz) < 1:
        raise domain_error("volume", f"patch size must be >= 1, got {tuple(size)}")
    patches = []
    for z0 in range(0, vol.nz - pz + 1, gz):
        for y0 in range(0, vol.ny - py + 1, gy):
            for x0 in range(0, vol.nx - px + 1, gx):
                block = vol.data[z0 : z0 + pz, y0 : y0 + py, x0 : x0 + px]
                patches.append(Patch3d((x0, y0, z0), (px, py, pz), block))
    return patches


def window_slice(vol: CtVolume, z: int, lo: float, hi: float) -> np.ndarray:
    """Map slice z to [0, 1] display values: clamp((v - lo) / (hi - lo), 0, 1)."""
    if not lo < hi:
        raise domain_error("volume", f"window needs lo < hi, got [{lo}, {hi}]")
    if not 0 <= z < vol.nz:
        raise shape_error("volume", f"slice {z} out of range for nz={vol.nz}")
    return np.clip((vol.data[z] - lo) / (hi - lo), 0.0, 1.0)


def save_windowed_pgm(
    vol: CtVolume, z: int, lo: float, hi: float, path: str | os.PathLike
) -> None:
    """Export a windowed slice as a 16-bit PGM (P5), value = round(w * 65535)."""
    w = window_slice(vol, z, lo, hi)
    pixels = np.round(w * 65535.0).astype(">u2")
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{vol.nx} {vol.ny}\n65535\n".encode("ascii"))
            fh.write(pixels.tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def _read_header_line(fh, key, path, cast, count):
    parts = fh.readline().decode("ascii", "replace").split()
    if len(parts) != count + 1 or parts[0] != key:
        raise FormatError(f"bad {key} line {parts} in {path}")
    try:
        return [cast(p) for p in parts[1:]]
    except ValueError as exc:
        raise FormatError(f"bad {key} values {parts[1:]} in {path}") from exc
