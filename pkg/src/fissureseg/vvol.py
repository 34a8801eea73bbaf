"""Reader and writer for the VVOL volume format.

A VVOL file is a one-line JSON header terminated by ``\\n`` followed by the
raw little-endian payload, x fastest, then y, then z, channel slowest::

    {"magic":"VVOL1","dims":[nx,ny,nz],"channels":C,"dtype":"f32","kind":"channel"}

Label files additionally carry ``"num_classes"`` so the class count
survives a round trip; readers treat it as optional.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError
from .volume import ChannelVolume, LabelVolume, ScalarVolume

MAGIC = "VVOL1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_KIND_DTYPE = {"scalar": "f32", "channel": "f32", "label": "u8"}
_MAX_HEADER = 1 << 16


def _to_disk_order(arr: np.ndarray) -> np.ndarray:
    # (C, x, y, z) -> flat with x fastest and c slowest
    if arr.ndim == 3:
        arr = arr[None]
    return np.transpose(arr, (0, 3, 2, 1)).reshape(-1)


def _from_disk_order(flat: np.ndarray, channels: int, dims) -> np.ndarray:
    nx, ny, nz = dims
    return np.transpose(flat.reshape(channels, nz, ny, nx), (0, 3, 2, 1))


def encode(volume) -> bytes:
    if isinstance(volume, ScalarVolume):
        kind, channels, arr = "scalar", 1, volume.data
    elif isinstance(volume, ChannelVolume):
        kind, channels, arr = "channel", volume.channels, volume.data
    elif isinstance(volume, LabelVolume):
        kind, channels, arr = "label", 1, volume.data
    else:
        raise TypeError(f"cannot encode {type(volume).__name__}")
    dtype = _KIND_DTYPE[kind]
    header = {
        "magic": MAGIC,
        "dims": [int(n) for n in volume.shape],
        "channels": channels,
        "dtype": dtype,
        "kind": kind,
    }
    if kind == "label":
        header["num_classes"] = volume.num_classes
    payload = _to_disk_order(arr).astype(_DTYPES[dtype]).tobytes()
    return json.dumps(header, separators=(",", ":")).encode("ascii") + b"\n" + payload


def decode(buf: bytes, path=None):
    nl = buf.find(b"\n", 0, _MAX_HEADER)
    if nl < 0:
        raise VolumeFormatError("header is not newline-terminated", 0, path)
    try:
        header = json.loads(buf[:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"malformed header JSON: {exc}", 0, path) from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise VolumeFormatError("bad magic, expected VVOL1", 0, path)

    dims = header.get("dims")
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(n, int) and not isinstance(n, bool) for n in dims)):
        raise VolumeFormatError(f"dims must be three integers, got {dims!r}", 0, path)
    if any(n < 1 for n in dims):
        raise VolumeFormatError(f"dims must be >= 1, got {dims}", 0, path)
    kind = header.get("kind")
    if kind not in _KIND_DTYPE:
        raise VolumeFormatError(f"unknown kind {kind!r}", 0, path)
    dtype = header.get("dtype")
    if dtype != _KIND_DTYPE[kind]:
        raise VolumeFormatError(f"dtype {dtype!r} does not match kind {kind!r}", 0, path)
    channels = header.get("channels")
    if not isinstance(channels, int) or channels < 1 or (kind != "channel" and channels != 1):
        raise VolumeFormatError(f"invalid channel count {channels!r} for kind {kind!r}", 0, path)

    start = nl + 1
    dt = _DTYPES[dtype]
    expected = channels * dims[0] * dims[1] * dims[2] * dt.itemsize
    got = len(buf) - start
    if got < expected:
        raise VolumeFormatError(f"truncated payload: expected {expected} bytes, found {got}", len(buf), path)
    if got > expected:
        raise VolumeFormatError(f"{got - expected} trailing bytes after payload", start + expected, path)

    flat = np.frombuffer(buf, dtype=dt, count=expected // dt.itemsize, offset=start)
    arr = _from_disk_order(flat, channels, dims)
    if kind == "label":
        n = header.get("num_classes")
        try:
            return LabelVolume(arr[0], n)
        except ValueError as exc:
            raise VolumeFormatError(str(exc), start, path) from None
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise VolumeFormatError("non-finite value in payload", start + bad * dt.itemsize, path)
    if kind == "scalar":
        return ScalarVolume(arr[0].astype(np.float64))
    return ChannelVolume(arr.astype(np.float64))


def write_volume(path, volume) -> None:
    path = Path(path)
    data = encode(volume)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_volume(path):
    path = Path(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode(buf, path=str(path))
