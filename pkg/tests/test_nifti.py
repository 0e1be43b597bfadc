"""Volume reader/writer checks: round trips, compression, error paths."""

import gzip
import struct

import numpy as np
import pytest

from udaseg.data import load_volume
from udaseg.errors import VolumeFormatError
from udaseg.nifti import read_nifti, write_nifti


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    vol = rng.normal(size=(5, 12, 10)).astype(np.float32)
    path = str(tmp_path / "vol.nii")
    write_nifti(path, vol, spacing=(2.5, 1.5, 0.75))
    back, spacing = read_nifti(path)
    np.testing.assert_array_equal(back, vol)
    np.testing.assert_allclose(spacing, (2.5, 1.5, 0.75), rtol=1e-6)


def test_round_trip_gzipped(tmp_path):
    rng = np.random.default_rng(1)
    vol = (rng.random((4, 6, 6)) * 255).astype(np.uint8)
    path = str(tmp_path / "vol.nii.gz")
    write_nifti(path, vol, spacing=(1.0, 1.0, 1.0))
    with open(path, "rb") as fh:
        assert fh.read(2) == b"\x1f\x8b"
    back, _ = read_nifti(path)
    np.testing.assert_array_equal(back, vol)


def test_integer_dtypes_survive(tmp_path):
    for dtype in (np.uint8, np.int16, np.int32, np.float64):
        vol = np.arange(2 * 3 * 4, dtype=dtype).reshape(2, 3, 4)
        path = str(tmp_path / f"v_{np.dtype(dtype).name}.nii")
        write_nifti(path, vol, spacing=(1, 1, 1))
        back, _ = read_nifti(path)
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, vol)


def test_shape_is_slice_major(tmp_path):
    vol = np.zeros((7, 16, 9), dtype=np.float32)
    path = str(tmp_path / "vol.nii")
    write_nifti(path, vol, spacing=(3.0, 1.0, 2.0))
    back, spacing = read_nifti(path)
    assert back.shape == (7, 16, 9)
    assert spacing[0] == pytest.approx(3.0)


def test_scaling_fields_applied(tmp_path):
    # hand-build a header with scl_slope=2, scl_inter=10 around int16 data
    data = np.array([[[1, 2], [3, 4]]], dtype=np.int16)
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    dim = (3, 2, 2, 1, 1, 1, 1, 1)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, 4)  # int16 code
    struct.pack_into("<h", header, 72, 16)
    struct.pack_into("<8f", header, 76, 1, 1, 1, 1, 1, 1, 1, 1)
    struct.pack_into("<f", header, 108, 352)  # vox_offset
    struct.pack_into("<f", header, 112, 2.0)  # scl_slope
    struct.pack_into("<f", header, 116, 10.0)  # scl_inter
    header[344:348] = b"n+1\x00"
    path = tmp_path / "scaled.nii"
    path.write_bytes(bytes(header) + b"\x00\x00\x00\x00" + data.tobytes())
    vol, _ = read_nifti(str(path))
    np.testing.assert_allclose(np.sort(vol.ravel()), [12.0, 14.0, 16.0, 18.0])


def test_missing_file_names_path(tmp_path):
    missing = str(tmp_path / "nope.nii")
    with pytest.raises(FileNotFoundError) as err:
        read_nifti(missing)
    assert "nope.nii" in str(err.value)


def test_corrupt_header_rejected(tmp_path):
    path = tmp_path / "bad.nii"
    path.write_bytes(b"\x00" * 400)
    with pytest.raises(VolumeFormatError):
        read_nifti(str(path))


def test_truncated_data_rejected(tmp_path):
    vol = np.ones((3, 4, 4), dtype=np.float32)
    path = str(tmp_path / "cut.nii")
    write_nifti(path, vol, spacing=(1, 1, 1))
    with open(path, "rb") as fh:
        blob = fh.read()
    with open(path, "wb") as fh:
        fh.write(blob[:-20])
    with pytest.raises(VolumeFormatError):
        read_nifti(path)


def test_gzip_detected_by_content_not_name(tmp_path):
    vol = np.ones((2, 4, 4), dtype=np.float32)
    plain = str(tmp_path / "plain.nii")
    write_nifti(plain, vol, spacing=(1, 1, 1))
    with open(plain, "rb") as fh:
        blob = fh.read()
    disguised = tmp_path / "hidden.nii"
    disguised.write_bytes(gzip.compress(blob))
    back, _ = read_nifti(str(disguised))
    np.testing.assert_array_equal(back, vol)


def test_load_volume_is_reader_alias(tmp_path):
    vol = np.full((2, 4, 4), 7, dtype=np.int16)
    path = str(tmp_path / "v.nii")
    write_nifti(path, vol, spacing=(5.0, 0.5, 0.5))
    arr, spacing = load_volume(path)
    np.testing.assert_array_equal(arr, vol)
    assert tuple(np.round(spacing, 6)) == (5.0, 0.5, 0.5)
