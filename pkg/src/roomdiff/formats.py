"""Binary container formats.

SVOX1  sparse voxel volume: header (magic, extent, channels, entry count)
       followed by lexicographically sorted (i, j, k, features) records.
TSDF1  dense normalized TSDF raster with grid metadata.
DIDS1  checkpoint container: named float32 parameter blocks plus JSON
       metadata blocks.

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import TsdfVolume
from .grids import GridExtent, OccupancyMask, SparseVolume

__all__ = [
    "save_svox", "load_svox",
    "save_tsdf", "load_tsdf",
    "save_checkpoint", "load_checkpoint",
]

_SVOX_MAGIC = b"SVOX1"
_TSDF_MAGIC = b"TSDF1"
_CKPT_MAGIC = b"DIDS1"


def save_svox(volume: SparseVolume, path):
    with open(path, "wb") as f:
        f.write(_SVOX_MAGIC)
        f.write(struct.pack("<3IIQ", *volume.extent.as_tuple(), volume.channels,
                            volume.n_active))
        rec = np.empty(volume.n_active,
                       dtype=[("ijk", "<i4", (3,)), ("feat", "<f4", (volume.channels,))])
        rec["ijk"] = volume.coords
        rec["feat"] = volume.feats
        f.write(rec.tobytes())


def load_svox(path) -> SparseVolume:
    with open(path, "rb") as f:
        if f.read(5) != _SVOX_MAGIC:
            raise ValueError(f"{path}: not an SVOX1 file")
        h, w, l, channels, count = struct.unpack("<3IIQ", f.read(24))
        rec_size = 12 + 4 * channels
        payload = f.read(count * rec_size)
        if len(payload) != count * rec_size:
            raise ValueError(f"{path}: truncated SVOX1 payload")
        rec = np.frombuffer(payload,
                            dtype=[("ijk", "<i4", (3,)), ("feat", "<f4", (channels,))])
    coords = np.ascontiguousarray(rec["ijk"])
    feats = np.ascontiguousarray(rec["feat"]).reshape(count, channels)
    return SparseVolume(GridExtent(h, w, l), coords, feats)


def _tsdf_sentinel(voxel_size: float, truncation: float) -> np.float32:
    """Unobserved-voxel marker, derived from float32-rounded metadata so the
    writer and the reader agree bit for bit."""
    vs = float(np.float32(voxel_size))
    tr = float(np.float32(truncation))
    return np.float32(min(1.0, tr) / vs)


def save_tsdf(tsdf: TsdfVolume, path):
    """The raster marks unobserved voxels with the clamped raw default; an
    active voxel matching that exact float32 value would be dropped on
    load, so producers keep sampled values strictly inside the band."""
    sentinel = _tsdf_sentinel(tsdf.voxel_size, tsdf.truncation)
    dense = np.full(tsdf.extent.as_tuple(), sentinel, dtype=np.float32)
    c = tsdf.volume.coords
    dense[c[:, 0], c[:, 1], c[:, 2]] = tsdf.volume.feats[:, 0].astype(np.float32)
    with open(path, "wb") as f:
        f.write(_TSDF_MAGIC)
        f.write(struct.pack("<3I", *tsdf.extent.as_tuple()))
        f.write(struct.pack("<2f", tsdf.voxel_size, tsdf.truncation))
        f.write(struct.pack("<3f", *tsdf.origin))
        f.write(dense.astype("<f4").tobytes())


def load_tsdf(path) -> TsdfVolume:
    with open(path, "rb") as f:
        if f.read(5) != _TSDF_MAGIC:
            raise ValueError(f"{path}: not a TSDF1 file")
        h, w, l = struct.unpack("<3I", f.read(12))
        voxel_size, truncation = struct.unpack("<2f", f.read(8))
        origin = np.array(struct.unpack("<3f", f.read(12)), dtype=np.float64)
        dense = np.frombuffer(f.read(4 * h * w * l), dtype="<f4")
        if dense.size != h * w * l:
            raise ValueError(f"{path}: truncated TSDF1 payload")
    dense = dense.reshape(h, w, l)
    sentinel = _tsdf_sentinel(voxel_size, truncation)
    active = dense != sentinel
    mask = OccupancyMask.from_dense(active, GridExtent(h, w, l))
    vol = SparseVolume.from_dense(dense[..., None], mask)
    return TsdfVolume(vol, voxel_size, truncation, origin)


def save_checkpoint(path, arrays: dict, meta: dict):
    """Write named float32 blocks plus a '__meta__' JSON block."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(arrays) + 1))
        _write_block(f, "__meta__", meta)
        for name in sorted(arrays):
            _write_block(f, name, np.asarray(arrays[name], dtype=np.float32))


def _write_block(f, name: str, payload):
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    if isinstance(payload, np.ndarray):
        f.write(struct.pack("<BB", 0, payload.ndim))
        f.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
        f.write(payload.astype("<f4").tobytes())
    else:
        data = json.dumps(payload, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<BI", 1, len(data)))
        f.write(data)


def load_checkpoint(path):
    """Returns (arrays, meta)."""
    arrays = {}
    meta = None
    with open(path, "rb") as f:
        if f.read(5) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a DIDS1 checkpoint")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (kind,) = struct.unpack("<B", f.read(1))
            if kind == 0:
                (ndim,) = struct.unpack("<B", f.read(1))
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                n = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
                arrays[name] = arr.astype(np.float32)
            elif kind == 1:
                (length,) = struct.unpack("<I", f.read(4))
                payload = json.loads(f.read(length).decode("utf-8"))
                if name == "__meta__":
                    meta = payload
                else:
                    arrays[name] = payload
            else:
                raise ValueError(f"{path}: unknown block kind {kind}")
    if meta is None:
        raise ValueError(f"{path}: checkpoint is missing its metadata block")
    return arrays, meta


def file_sha256(path) -> str:
    import hashlib
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
