"""Versioned binary container: JSON manifest + raw array payload.

Checkpoints and dataset archives need byte-identical files under identical
inputs, which rules out zip-based formats (they embed timestamps). Layout:

    magic b'UDSC' | version uint32 LE | manifest_len uint64 LE
    | manifest JSON (utf-8, sorted keys) | concatenated C-order array bytes

The manifest carries user metadata under "meta" and an index under "arrays"
mapping name -> {dtype, shape, offset, nbytes} with offsets relative to the
end of the manifest. Arrays are written in sorted name order.
"""

import json
import os

import numpy as np

from .errors import VolumeFormatError

MAGIC = b"UDSC"
FORMAT_VERSION = 1


def write_container(path, meta, arrays):
    """Write `meta` (JSON-serializable dict) and `arrays` (name -> ndarray)."""
    index = {}
    payload = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        index[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        payload.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"meta": meta, "arrays": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(FORMAT_VERSION.to_bytes(4, "little"))
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        for raw in payload:
            f.write(raw)
    os.replace(tmp, path)
    return path


def read_container(path):
    """Read a container; returns (meta, arrays dict)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such container file: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise VolumeFormatError(f"not a container file: {path}")
    version = int.from_bytes(blob[4:8], "little")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(
            f"unsupported container version {version} in {path}"
        )
    mlen = int.from_bytes(blob[8:16], "little")
    if len(blob) < 16 + mlen:
        raise VolumeFormatError(f"truncated container manifest: {path}")
    try:
        manifest = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"corrupt container manifest: {path}") from exc
    data_start = 16 + mlen
    arrays = {}
    for name, spec in manifest["arrays"].items():
        start = data_start + spec["offset"]
        end = start + spec["nbytes"]
        if end > len(blob):
            raise VolumeFormatError(f"truncated container payload: {path}")
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(spec["dtype"]))
        arrays[name] = arr.reshape(spec["shape"]).copy()
    return manifest["meta"], arrays
