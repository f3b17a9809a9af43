import numpy as np
import pytest

from ctjbf.errors import DomainError, FormatError, ShapeError, TruncationError
from ctjbf.volume import (
    CtVolume,
    extract_patches,
    load_volume,
    save_volume,
    save_windowed_pgm,
    window_slice,
)


def make_vol(nx, ny, nz, values=None, spacing=(1.0, 1.0, 1.0)):
    if values is None:
        values = np.zeros(nx * ny * nz)
    return CtVolume((nx, ny, nz), spacing, np.asarray(values, dtype=np.float64))


class TestIO:
    def test_zero_volume_round_trip(self, tmp_path):
        path = tmp_path / "zero.ctv"
        save_volume(make_vol(2, 2, 1), path)
        vol = load_volume(path)
        assert vol.dims == (2, 2, 1)
        assert np.all(vol.data == 0.0)

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(7)
        # float32-representable values survive the float32 payload bit-exactly
        values = rng.standard_normal(3 * 4 * 5).astype(np.float32).astype(np.float64)
        vol = make_vol(3, 4, 5, values, spacing=(0.5, 0.7, 2.0))
        path = tmp_path / "v.ctv"
        save_volume(vol, path)
        back = load_volume(path)
        assert back.dims == vol.dims
        assert back.spacing == vol.spacing
        assert np.array_equal(back.data, vol.data)

    def test_save_load_payload_byte_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        vol = make_vol(4, 3, 2, rng.standard_normal(24).astype(np.float32))
        p1, p2 = tmp_path / "a.ctv", tmp_path / "b.ctv"
        save_volume(vol, p1)
        save_volume(load_volume(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ctv"
        path.write_bytes(b"CTVOL2\ndims 1 1 1\nspacing 1 1 1\ndata float32 le\n" + b"\0" * 4)
        with pytest.raises(FormatError):
            load_volume(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.ctv"
        save_volume(make_vol(2, 2, 2), path)
        data = path.read_bytes()
        path.write_bytes(data[:-4])
        with pytest.raises(TruncationError):
            load_volume(path)

    def test_payload_size(self, tmp_path):
        path = tmp_path / "z.ctv"
        save_volume(make_vol(2, 2, 1), path)
        raw = path.read_bytes()
        header_end = raw.index(b"data float32 le\n") + len(b"data float32 le\n")
        assert len(raw) - header_end == 4 * 4

    def test_nan_rejected_before_write(self, tmp_path):
        values = np.zeros(8)
        values[3] = np.nan
        vol = make_vol(2, 2, 2, values)
        with pytest.raises(DomainError):
            save_volume(vol, tmp_path / "nan.ctv")
        assert not (tmp_path / "nan.ctv").exists()

    def test_dims_data_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            CtVolume((2, 2, 2), (1, 1, 1), np.zeros(7))

    def test_nonpositive_dims_rejected(self):
        with pytest.raises(ShapeError):
            CtVolume((0, 2, 2), (1, 1, 1), np.zeros(0))


class TestPatches:
    def test_2x2_tiling(self):
        vol = make_vol(128, 128, 9, np.arange(128 * 128 * 9))
        patches = extract_patches(vol, (64, 64, 9))
        assert len(patches) == 4
        assert [p.origin for p in patches] == [(0, 0, 0), (64, 0, 0), (0, 64, 0), (64, 64, 0)]

    def test_identity_patch(self):
        rng = np.random.default_rng(0)
        vol = make_vol(64, 64, 9, rng.standard_normal(64 * 64 * 9))
        patches = extract_patches(vol, (64, 64, 9))
        assert len(patches) == 1
        assert np.array_equal(patches[0].data, vol.data)

    def test_state_patch_size(self):
        vol = make_vol(9, 9, 5, np.arange(405))
        patches = extract_patches(vol, (9, 9, 5))
        assert len(patches) == 1
        assert patches[0].dims == (9, 9, 5)

    def test_oversized_window_gives_empty(self):
        vol = make_vol(8, 8, 4)
        assert extract_patches(vol, (9, 9, 5)) == []

    def test_trailing_regions_dropped(self):
        vol = make_vol(10, 10, 5)
        patches = extract_patches(vol, (4, 4, 5))
        assert len(patches) == 4  # 2 x 2; trailing 2 voxels per axis dropped

    def test_partition_covers_each_voxel_once(self):
        rng = np.random.default_rng(5)
        vol = make_vol(11, 7, 6, rng.standard_normal(11 * 7 * 6))
        size = (3, 2, 2)
        counts = np.zeros((6, 7, 11))
        for p in patches_or_fail(vol, size):
            x0, y0, z0 = p.origin
            counts[z0 : z0 + 2, y0 : y0 + 2, x0 : x0 + 3] += 1
        covered = counts > 0
        assert np.all(counts[covered] == 1)
        # covered region is the full multiple of the patch size
        assert covered[: 6 // 2 * 2, : 7 // 2 * 2, : 11 // 3 * 3].all()

    def test_bad_stride_rejected(self):
        with pytest.raises(DomainError):
            extract_patches(make_vol(4, 4, 4), (2, 2, 2), (0, 1, 1))


def patches_or_fail(vol, size):
    patches = extract_patches(vol, size)
    assert patches
    return patches


class TestWindowing:
    def test_window_endpoints_and_midpoint(self):
        vol = make_vol(3, 1, 1, [-800.0, 1200.0, 200.0])
        img = window_slice(vol, 0, -800.0, 1200.0)
        assert img[0, 0] == 0.0
        assert img[0, 1] == 1.0
        assert img[0, 2] == 0.5

    def test_window_clamps(self):
        vol = make_vol(2, 1, 1, [-2000.0, 3000.0])
        img = window_slice(vol, 0, -800.0, 1200.0)
        assert img[0, 0] == 0.0 and img[0, 1] == 1.0

    def test_window_monotone(self):
        rng = np.random.default_rng(11)
        values = np.sort(rng.uniform(-1500, 2000, size=64))
        img = window_slice(make_vol(64, 1, 1, values), 0, -800, 1200)
        assert np.all(np.diff(img[0]) >= 0)

    def test_z_out_of_range(self):
        with pytest.raises(ShapeError):
            window_slice(make_vol(2, 2, 2), 2, -800, 1200)

    def test_bad_window(self):
        with pytest.raises(DomainError):
            window_slice(make_vol(2, 2, 2), 0, 100, 100)

    def test_pgm_export(self, tmp_path):
        vol = make_vol(2, 2, 1, [-800.0, 200.0, 1200.0, 5000.0])
        path = tmp_path / "s.pgm"
        save_windowed_pgm(vol, 0, -800, 1200, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n2 2\n65535\n")
        pix = np.frombuffer(raw[len(b"P5\n2 2\n65535\n") :], dtype=">u2").reshape(2, 2)
        assert pix[0, 0] == 0
        assert pix[0, 1] == round(0.5 * 65535)
        assert pix[1, 0] == 65535 and pix[1, 1] == 65535
