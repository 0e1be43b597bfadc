"""Minimal NIfTI-1 volume reader/writer (.nii / .nii.gz).

Covers the subset needed for segmentation volumes: 3-D images, the common
numeric dtypes, scl_slope/scl_inter rescaling, and voxel spacing. Arrays are
returned with axis order (slice, H, W), i.e. the file's fastest-varying axis
last, and spacing is returned in the same axis order.
"""

import gzip
import os
import struct

import numpy as np

from .errors import VolumeFormatError

_HDR_SIZE = 348
_MAGIC_OFFSETS = (b"n+1\x00", b"ni1\x00")

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}
_CODES = {v: k for k, v in _DTYPES.items()}


def _open_maybe_gzip(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path):
    """Read a NIfTI-1 volume. Returns (array (slice, H, W), spacing (3,))."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such volume file: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] == b"\x1f\x8b":  # compressed regardless of extension
        try:
            blob = gzip.decompress(blob)
        except OSError as exc:
            raise VolumeFormatError(f"bad gzip stream in {path}: {exc}")
    if len(blob) < _HDR_SIZE:
        raise VolumeFormatError(f"truncated NIfTI header: {path}")

    sizeof_hdr = struct.unpack_from("<i", blob, 0)[0]
    endian = "<"
    if sizeof_hdr != _HDR_SIZE:
        sizeof_hdr = struct.unpack_from(">i", blob, 0)[0]
        endian = ">"
        if sizeof_hdr != _HDR_SIZE:
            raise VolumeFormatError(f"not a NIfTI-1 file: {path}")
    if blob[344:348] not in _MAGIC_OFFSETS:
        raise VolumeFormatError(f"bad NIfTI magic in {path}")

    dim = struct.unpack_from(endian + "8h", blob, 40)
    datatype = struct.unpack_from(endian + "h", blob, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    vox_offset = int(struct.unpack_from(endian + "f", blob, 108)[0])
    scl_slope = struct.unpack_from(endian + "f", blob, 112)[0]
    scl_inter = struct.unpack_from(endian + "f", blob, 116)[0]

    ndim = dim[0]
    if ndim < 3:
        raise VolumeFormatError(f"expected a 3-D volume, got {ndim}-D: {path}")
    shape = list(dim[1 : 1 + ndim])
    if any(s < 1 for s in shape):
        raise VolumeFormatError(f"invalid dimensions {shape} in {path}")
    # Trailing singleton axes (e.g. a unit time axis) are harmless; squeeze them.
    while len(shape) > 3 and shape[-1] == 1:
        shape.pop()
    if len(shape) != 3:
        raise VolumeFormatError(f"expected a 3-D volume, got shape {shape}: {path}")

    if datatype not in _DTYPES:
        raise VolumeFormatError(f"unsupported NIfTI datatype {datatype}: {path}")
    dtype = _DTYPES[datatype].newbyteorder(endian)

    count = int(np.prod(shape))
    end = vox_offset + count * dtype.itemsize
    if len(blob) < end:
        raise VolumeFormatError(f"truncated NIfTI data: {path}")
    flat = np.frombuffer(blob[vox_offset:end], dtype=dtype)
    # File stores the first header axis fastest; C-order reshape with reversed
    # dims yields (slice, H, W).
    vol = flat.reshape(shape[::-1])
    vol = np.asarray(vol, dtype=vol.dtype.newbyteorder("="))

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vol = vol.astype(np.float32) * slope + scl_inter

    spacing = np.array([pixdim[3], pixdim[2], pixdim[1]], dtype=np.float64)
    spacing[spacing <= 0] = 1.0
    return vol.copy(), spacing


def write_nifti(path, volume, spacing=(1.0, 1.0, 1.0)):
    """Write a 3-D array (slice, H, W) as NIfTI-1, spacing in array axis order."""
    vol = np.ascontiguousarray(volume)
    if vol.ndim != 3:
        raise VolumeFormatError(f"expected a 3-D volume, got shape {vol.shape}")
    if vol.dtype not in _CODES:
        raise VolumeFormatError(f"unsupported dtype for NIfTI write: {vol.dtype}")

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    nk, nj, ni = vol.shape
    struct.pack_into("<8h", hdr, 40, 3, ni, nj, nk, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODES[vol.dtype])
    struct.pack_into("<h", hdr, 72, vol.dtype.itemsize * 8)
    dk, dj, di = (float(s) for s in spacing)
    struct.pack_into("<8f", hdr, 76, 0.0, di, dj, dk, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, 1.0)
    struct.pack_into("<f", hdr, 116, 0.0)
    hdr[344:348] = b"n+1\x00"

    with _open_maybe_gzip(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)  # pad to vox_offset 352
        f.write(vol.tobytes())
    return path
