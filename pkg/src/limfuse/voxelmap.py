"""Sparse uniform voxel grid of latent features with overlap-aware assignment.

Voxels are keyed by the integer triple floor(p / voxel_size).  Each voxel
encodes the doubled cube around its center (edge 2 * voxel_size), so the
encoding regions of neighboring voxels overlap by half and every point is
covered by up to eight encoders.  Fusion is a per-voxel weighted running
mean with observation counts as weights.

Concurrency contract: queries are read-only and may run concurrently;
integration requires exclusive access per touched key (no ordering
guarantee between distinct keys).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import KINDS, LatentFeature
from .kernel import PositionalEncoder, posi_encode

MAP_MAGIC = b"LIMM"
MAP_VERSION = 1

_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_CODE_KIND = {i: k for k, i in _KIND_CODE.items()}

# Packed-key budget: 21 bits per axis, signed via offset.
_PACK_OFFSET = 1 << 20


def voxel_index(points, voxel_size: float):
    """Integer voxel triple(s) owning the given world point(s): floor(p / size)."""
    p = np.asarray(points, dtype=np.float64)
    idx = np.floor(p / voxel_size).astype(np.int64)
    return idx


def voxel_center(index, voxel_size: float):
    """World center of a voxel: (index + 0.5) * voxel_size."""
    return (np.asarray(index, dtype=np.float64) + 0.5) * voxel_size


def _pack(keys: np.ndarray) -> np.ndarray:
    if np.any(np.abs(keys) >= _PACK_OFFSET):
        raise ValueError("voxel index out of packable range (|i| < 2^20)")
    return (((keys[..., 0] + _PACK_OFFSET) << 42)
            | ((keys[..., 1] + _PACK_OFFSET) << 21)
            | (keys[..., 2] + _PACK_OFFSET))


def _unpack(packed: np.ndarray) -> np.ndarray:
    mask = (1 << 21) - 1
    return np.stack([(packed >> 42) - _PACK_OFFSET,
                     ((packed >> 21) & mask) - _PACK_OFFSET,
                     (packed & mask) - _PACK_OFFSET], axis=-1)


def overlapped_groups(points: np.ndarray, voxel_size: float):
    """Group points by every voxel whose doubled cube contains them.

    Every point lands in exactly eight voxels: per axis the two indices
    {floor(t + 0.5) - 1, floor(t + 0.5)} with t = p / voxel_size, which is
    the half-open membership (center - size <= p < center + size).

    Returns (keys, row_start, rows, normalized): voxel triples (V, 3), CSR
    offsets (V + 1,), point-row indices, and coordinates normalized to the
    doubled frame, (p - center) / (2 * voxel_size), always in [-0.5, 0.5).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if n == 0:
        return (np.empty((0, 3), np.int64), np.zeros(1, np.int64),
                np.empty(0, np.int64), np.empty((0, 3)))
    upper = np.floor(pts / voxel_size + 0.5).astype(np.int64)
    offs = np.array([[dx, dy, dz] for dx in (-1, 0) for dy in (-1, 0) for dz in (-1, 0)],
                    dtype=np.int64)
    keys8 = upper[:, None, :] + offs[None, :, :]              # (n, 8, 3)
    packed = _pack(keys8.reshape(-1, 3))
    rows = np.repeat(np.arange(n, dtype=np.int64), 8)

    order = np.argsort(packed, kind="stable")
    packed = packed[order]
    rows = rows[order]
    starts = np.flatnonzero(np.r_[True, packed[1:] != packed[:-1]])
    row_start = np.r_[starts, packed.size]
    keys = _unpack(packed[starts])

    centers = voxel_center(keys, voxel_size)
    expand = np.repeat(np.arange(keys.shape[0]), np.diff(row_start))
    normalized = (pts[rows] - centers[expand]) / (2.0 * voxel_size)
    return keys, row_start, rows, normalized


def assign_points_overlapped(points: np.ndarray, voxel_size: float) -> dict:
    """Overlapped assignment as a mapping voxel triple -> (rows, normalized)."""
    keys, row_start, rows, normalized = overlapped_groups(points, voxel_size)
    out = {}
    for i, key in enumerate(map(tuple, keys)):
        s, e = row_start[i], row_start[i + 1]
        out[key] = (rows[s:e], normalized[s:e])
    return out


@dataclass
class Voxel:
    center: np.ndarray
    feature: LatentFeature
    weight: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.weight <= 0:
            raise ValueError(f"stored voxels need positive weight, got {self.weight}")


class LatentImplicitMap:
    """Sparse integer-indexed grid of voxels for one field kind."""

    def __init__(self, voxel_size: float, kind: str, channels: int,
                 encoder: PositionalEncoder):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        if voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        self.voxel_size = float(voxel_size)
        self.kind = kind
        self.channels = int(channels)
        self.encoder = encoder
        self.voxels: dict[tuple, Voxel] = {}

    @property
    def rank(self) -> int:
        return self.encoder.rank

    @property
    def encoder_ref(self) -> str:
        return self.encoder.ref_hash()

    def __len__(self) -> int:
        return len(self.voxels)

    def __contains__(self, key) -> bool:
        return tuple(key) in self.voxels

    def add(self, key, feature: LatentFeature, weight: int) -> None:
        """Insert or fuse one voxel at the given integer index."""
        key = tuple(int(v) for v in key)
        if feature.kind != self.kind or feature.channels != self.channels \
                or feature.rank != self.rank:
            raise ValueError("latent shape/kind does not match this map")
        voxel = Voxel(voxel_center(np.array(key), self.voxel_size), feature, weight)
        if key in self.voxels:
            self.voxels[key] = fuse_voxel(self.voxels[key], voxel)
        else:
            self.voxels[key] = voxel

    def bounds(self):
        """(min_index, max_index) over allocated voxels, or None when empty."""
        if not self.voxels:
            return None
        keys = np.array(list(self.voxels.keys()), dtype=np.int64)
        return keys.min(axis=0), keys.max(axis=0)

    def content_digest(self) -> str:
        """Digest of the serialized content; stable under pure reads."""
        return hashlib.sha256(_map_payload(self)).hexdigest()


def fuse_voxel(global_voxel: Voxel, local_voxel: Voxel) -> Voxel:
    """Weighted running mean of two voxels observing the same cell.

    F <- (F_g w_g + F_l w_l) / (w_g + w_l), w <- w_g + w_l.
    """
    if not np.array_equal(global_voxel.center, local_voxel.center):
        raise ValueError("cannot fuse voxels with different centers")
    fg, fl = global_voxel.feature, local_voxel.feature
    if fg.matrix.shape != fl.matrix.shape or fg.kind != fl.kind:
        raise ValueError("cannot fuse voxels with mismatched latent shape or kind")
    wg, wl = global_voxel.weight, local_voxel.weight
    fused = (fg.matrix * wg + fl.matrix * wl) / (wg + wl)
    return Voxel(global_voxel.center, LatentFeature(fused, kind=fg.kind), wg + wl)


def integrate(global_map: LatentImplicitMap, local_map: LatentImplicitMap) -> LatentImplicitMap:
    """Fuse every voxel of a local map into the global one (in place).

    New keys are allocated on demand; existing ones take the weighted mean.
    """
    if global_map.voxel_size != local_map.voxel_size:
        raise ValueError("voxel_size mismatch")
    if global_map.kind != local_map.kind or global_map.channels != local_map.channels:
        raise ValueError("kind/channel mismatch")
    if global_map.encoder_ref != local_map.encoder_ref:
        raise ValueError("maps were built against different encoding bases")
    for key, voxel in local_map.voxels.items():
        if key in global_map.voxels:
            global_map.voxels[key] = fuse_voxel(global_map.voxels[key], voxel)
        else:
            global_map.voxels[key] = voxel
    return global_map


def query(lim: LatentImplicitMap, points: np.ndarray):
    """Decode the map at world points through each point's owning voxel.

    Ownership is the plain floor-indexed voxel; the point is normalized
    into that voxel's doubled frame and decoded with its latent.  Returns
    (values (M, c), valid (M,)); absent voxels are masked out, not errors.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    m = pts.shape[0]
    values = np.zeros((m, lim.channels))
    valid = np.zeros(m, dtype=bool)
    if m == 0 or not lim.voxels:
        return values, valid

    packed = _pack(voxel_index(pts, lim.voxel_size))
    order = np.argsort(packed, kind="stable")
    sorted_keys = packed[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    bounds = np.r_[starts, m]
    uniq = _unpack(sorted_keys[starts])
    for i, key in enumerate(map(tuple, uniq)):
        voxel = lim.voxels.get(key)
        if voxel is None:
            continue
        rows = order[bounds[i]:bounds[i + 1]]
        normalized = (pts[rows] - voxel.center) / (2.0 * lim.voxel_size)
        values[rows] = posi_encode(lim.encoder, normalized) @ voxel.feature.matrix
        valid[rows] = True
    return values, valid


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _record_dtype(rank: int, channels: int) -> np.dtype:
    return np.dtype([("index", "<i4", 3), ("weight", "<u4"), ("feature", "<f4", rank * channels)])


def _map_payload(lim: LatentImplicitMap) -> bytes:
    head = struct.pack("<4sIBIId", MAP_MAGIC, MAP_VERSION, _KIND_CODE[lim.kind],
                       lim.channels, lim.rank, lim.voxel_size)
    head += bytes.fromhex(lim.encoder_ref)
    head += struct.pack("<Q", len(lim.voxels))
    records = np.empty(len(lim.voxels), dtype=_record_dtype(lim.rank, lim.channels))
    for i, (key, voxel) in enumerate(sorted(lim.voxels.items())):
        records[i]["index"] = key
        records[i]["weight"] = voxel.weight
        records[i]["feature"] = voxel.feature.matrix.astype(np.float32).ravel()
    return head + records.tobytes()


def save_map(lim: LatentImplicitMap, path) -> None:
    """Write the map as a little-endian binary artifact.

    Features are stored as float32 (in-memory latents are float64); the
    first save quantizes, after which save/load round-trips bit-exactly.
    """
    with open(path, "wb") as f:
        f.write(_map_payload(lim))


def load_map(path, encoder: PositionalEncoder) -> LatentImplicitMap:
    """Load a map artifact; the supplied basis must match the stored digest."""
    with open(path, "rb") as f:
        raw = f.read()
    head_fmt = "<4sIBIId"
    head_size = struct.calcsize(head_fmt)
    if len(raw) < head_size + 32 + 8:
        raise ValueError(f"{path}: truncated map file")
    magic, version, kind_code, channels, rank, voxel_size = struct.unpack_from(head_fmt, raw)
    if magic != MAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAP_MAGIC!r}")
    if version != MAP_VERSION:
        raise ValueError(f"{path}: unsupported map version {version}")
    kind = _CODE_KIND.get(kind_code)
    if kind is None:
        raise ValueError(f"{path}: unknown field kind code {kind_code}")
    off = head_size
    ref = raw[off:off + 32].hex()
    off += 32
    if encoder.ref_hash() != ref:
        raise ValueError(f"{path}: map was built with basis {ref[:12]}..., "
                         f"got {encoder.ref_hash()[:12]}...")
    if rank != encoder.rank:
        raise ValueError(f"{path}: rank {rank} != encoder rank {encoder.rank}")
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    records = np.frombuffer(raw, dtype=_record_dtype(rank, channels), count=count, offset=off)
    lim = LatentImplicitMap(voxel_size, kind, channels, encoder)
    for rec in records:
        key = tuple(int(v) for v in rec["index"])
        feature = LatentFeature(rec["feature"].astype(np.float64).reshape(rank, channels),
                                kind=kind)
        lim.voxels[key] = Voxel(voxel_center(np.array(key), voxel_size), feature,
                                int(rec["weight"]))
    return lim
