"""Frame-to-mesh pipeline: local surface maps, SDF grids, meshing, raycasting.

The signed distance convention throughout is positive in free space and
zero on the surface; extracted meshes are therefore wound with outward
normals.  Field values inside a voxel live in its normalized doubled
frame, so grid extraction rescales them by 2 * voxel_size to meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import measure

from ._raycast import TriangleBvh
from .encoder import EncodingConfig, LatentFeature
from .gpis import GpisConfig, OrientedPoints, estimate_normals
from .kernel import (PositionalEncoder, encode_bulk_f32, posi_encode,
                     posi_encode_deriv)
from .voxelmap import LatentImplicitMap, overlapped_groups, query


@dataclass
class Camera:
    """Pinhole intrinsics plus a rigid camera-to-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        rot = self.pose[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
            raise ValueError("pose rotation is not a proper rigid rotation")

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]


@dataclass
class Frame:
    """A posed point cloud with optional normals and named property channels."""

    points: np.ndarray
    normals: np.ndarray | None = None
    properties: dict = field(default_factory=dict)
    camera: Camera | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = self.points.shape[0]
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape[0] != n:
                raise ValueError(f"{n} points but {self.normals.shape[0]} normals")
        cleaned = {}
        for name, vals in self.properties.items():
            vals = np.asarray(vals, dtype=np.float64)
            if vals.ndim == 1:
                vals = vals[:, None]
            if vals.shape[0] != n:
                raise ValueError(f"channel {name!r} has {vals.shape[0]} rows for {n} points")
            cleaned[name] = vals
        self.properties = cleaned

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and self.triangles.max() >= self.vertices.shape[0]:
            raise ValueError("triangle index out of range")
        if self.vertices.size and not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices contain non-finite values")

    @property
    def empty(self) -> bool:
        return self.vertices.shape[0] == 0


@dataclass
class SdfGrid:
    """Dense SDF samples on a uniform grid with a validity mask."""

    origin: np.ndarray
    spacing: float
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask shapes differ")

    @property
    def dims(self):
        return self.values.shape

    @property
    def empty(self) -> bool:
        return self.values.size == 0


def build_local_surface_lim(frame: Frame, enc: PositionalEncoder,
                            gpis_cfg: GpisConfig | None = None,
                            voxel_size: float = 0.05,
                            encoding: EncodingConfig | None = None) -> LatentImplicitMap:
    """Encode one frame's geometry into a local surface map.

    Every voxel whose doubled cube (the half-overlap with each neighbor)
    holds at least ``min_points`` observations is encoded from those
    points; the voxel weight is that count.  The overlap pads the
    allocated shell one ring past the data, keeping the zero level away
    from the allocation boundary.  An empty frame yields an empty map.
    """
    if gpis_cfg is None:
        gpis_cfg = GpisConfig()
    if encoding is None:
        encoding = EncodingConfig.for_kind("sdf")
    lim = LatentImplicitMap(voxel_size, "sdf", 1, enc)
    if len(frame) == 0:
        return lim

    normals = frame.normals
    if normals is None:
        viewpoint = frame.camera.position if frame.camera is not None else np.zeros(3)
        normals = estimate_normals(frame.points, k=16, viewpoint=viewpoint)

    keys, row_start, rows, normalized = overlapped_groups(frame.points, voxel_size)
    sizes = np.diff(row_start)
    selected = np.flatnonzero(sizes >= encoding.min_points)
    if selected.size == 0:
        return lim

    if gpis_cfg.mode == "sample":
        _encode_sample_groups(lim, enc, gpis_cfg.sample_distance, encoding, normals,
                              keys, row_start, rows, normalized, selected)
    else:
        _encode_derivative_groups(lim, enc, encoding, normals,
                                  keys, row_start, rows, normalized, selected)
    return lim


def _gather(row_start, rows, normalized, selected):
    """Concatenate the selected groups; returns slices into the result."""
    sizes = row_start[selected + 1] - row_start[selected]
    offsets = np.r_[0, np.cumsum(sizes)]
    take = np.concatenate([np.arange(row_start[g], row_start[g + 1]) for g in selected])
    return rows[take], normalized[take], offsets


def _encode_sample_groups(lim, enc, d, encoding, normals,
                          keys, row_start, rows, normalized, selected):
    rows_sel, norm_sel, offsets = _gather(row_start, rows, normalized, selected)
    nrm = normals[rows_sel]
    f_zero = encode_bulk_f32(enc, norm_sel).astype(np.float64)
    f_pos = encode_bulk_f32(enc, norm_sel + d * nrm).astype(np.float64)
    f_neg = encode_bulk_f32(enc, norm_sel - d * nrm).astype(np.float64)
    rank = enc.rank
    noise_sq = encoding.noise**2
    for i, g in enumerate(selected):
        s, e = offsets[i], offsets[i + 1]
        b0, bp, bn = f_zero[s:e], f_pos[s:e], f_neg[s:e]
        gram = b0.T @ b0 + bp.T @ bp + bn.T @ bn
        gram[np.diag_indices(rank)] += noise_sq
        rhs = d * (bp.sum(axis=0) - bn.sum(axis=0))
        latent = np.linalg.solve(gram, rhs)[:, None]
        lim.add(keys[g], LatentFeature(latent, kind="sdf"), int(e - s))


def _encode_derivative_groups(lim, enc, encoding, normals,
                              keys, row_start, rows, normalized, selected):
    rows_sel, norm_sel, offsets = _gather(row_start, rows, normalized, selected)
    nrm = normals[rows_sel]
    f_val = posi_encode(enc, norm_sel)
    f_der = [posi_encode_deriv(enc, norm_sel, ax) for ax in (1, 2, 3)]
    rank = enc.rank
    noise_sq = encoding.noise**2
    for i, g in enumerate(selected):
        s, e = offsets[i], offsets[i + 1]
        gram = f_val[s:e].T @ f_val[s:e]
        rhs = np.zeros(rank)
        for ax in range(3):
            blk = f_der[ax][s:e]
            gram += blk.T @ blk
            rhs += blk.T @ nrm[s:e, ax]
        gram[np.diag_indices(rank)] += noise_sq
        latent = np.linalg.solve(gram, rhs)[:, None]
        lim.add(keys[g], LatentFeature(latent, kind="sdf"), int(e - s))


def extract_sdf_grid(lim: LatentImplicitMap, samples_per_voxel_axis: int = 8,
                     boundary_trim: int = 1) -> SdfGrid:
    """Sample the map on a global grid at spacing voxel_size / r.

    Each grid node is decoded from its floor-owning voxel, evaluated in
    that voxel's overlapped (doubled) frame; nodes whose floor voxel is
    absent are masked invalid.  Because voxels are allocated through the
    overlap, the allocated shell extends a full ring beyond the data and
    the zero level stays interior to it.  ``boundary_trim`` masks that
    many sample rings at the shell boundary, where the regression runs out
    of data and would otherwise be extrapolated.  Values are in meters
    (normalized-frame values times 2 * voxel_size).
    """
    r = int(samples_per_voxel_axis)
    if r < 2:
        raise ValueError(f"need samples_per_voxel_axis >= 2, got {r}")
    if lim.kind != "sdf":
        raise ValueError(f"expected an sdf map, got kind {lim.kind!r}")
    span = lim.bounds()
    if span is None:
        return SdfGrid(np.zeros(3), lim.voxel_size / r,
                       np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), bool))
    lo, hi = span
    dims = tuple((hi - lo + 1) * r + 1)
    spacing = lim.voxel_size / r
    scale = 2.0 * lim.voxel_size
    fill = np.float32(scale)
    values = np.full(dims, fill, dtype=np.float32)
    mask = np.zeros(dims, dtype=bool)

    # All voxels share the same local sub-grid, so its encoding is computed
    # once; node t of a voxel sits at normalized t/(2r) - 0.25.
    t = np.arange(r)
    tx, ty, tz = np.meshgrid(t, t, t, indexing="ij")
    local = np.stack([tx, ty, tz], axis=-1).reshape(-1, 3) / (2.0 * r) - 0.25
    phi_local = posi_encode(lim.encoder, local)

    items = sorted(lim.voxels.items())
    feats = np.stack([v.feature.matrix[:, 0] for _, v in items])
    grid_vals = (feats @ phi_local.T) * scale
    for i, (key, _) in enumerate(items):
        b = (np.asarray(key) - lo) * r
        block = (slice(b[0], b[0] + r), slice(b[1], b[1] + r), slice(b[2], b[2] + r))
        values[block] = grid_vals[i].reshape(r, r, r).astype(np.float32)
        mask[block] = True

    if boundary_trim > 0:
        mask = ndimage.binary_erosion(mask, np.ones((3, 3, 3), bool),
                                      iterations=boundary_trim, border_value=0)
    origin = lo.astype(np.float64) * lim.voxel_size
    return SdfGrid(origin, spacing, values, mask)


def marching_cubes(grid: SdfGrid) -> Mesh:
    """Triangulate the zero isosurface of an SDF grid.

    Standard marching cubes with linear edge interpolation; grid cells
    touching a masked-invalid sample are skipped entirely rather than
    extrapolated, so surfaces end openly at the data boundary (no hole
    filling).  Vertices come back in world coordinates with triangles
    wound for outward (free-space-facing) normals.
    """
    empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    if grid.empty or not grid.mask.any():
        return empty
    valid_vals = grid.values[grid.mask]
    if valid_vals.min() > 0.0 or valid_vals.max() < 0.0:
        return empty
    # A cell is processed only when all eight corner samples are valid;
    # the library's own mask handling reads values at invalid corners and
    # would cap the surface at the region boundary.
    cell_mask = ndimage.binary_erosion(grid.mask, np.ones((2, 2, 2), bool), border_value=0)
    if not cell_mask.any():
        return empty
    try:
        verts, faces, _, _ = measure.marching_cubes(
            grid.values, level=0.0, spacing=(grid.spacing,) * 3,
            mask=cell_mask, allow_degenerate=False)
    except (RuntimeError, ValueError):
        return empty
    tri = verts[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    return Mesh(verts + grid.origin, faces[areas > 1e-12])


def raycast_render(mesh: Mesh, attributes_map: LatentImplicitMap | None,
                   camera: Camera):
    """Rasterize a mesh by ray casting from a pinhole camera.

    Returns (depth, properties): depth is (H, W) z-depth in meters with 0
    on misses; properties is (H, W, c) decoded from ``attributes_map`` at
    hit points (black on miss or unmapped voxel), or None when no map is
    given.
    """
    h, w = camera.height, camera.width
    depth = np.zeros((h, w))
    props = None
    if attributes_map is not None:
        props = np.zeros((h, w, attributes_map.channels))
    if mesh.empty or mesh.triangles.shape[0] == 0:
        return depth, props

    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack([(us - camera.cx) / camera.fx,
                         (vs - camera.cy) / camera.fy,
                         np.ones_like(us, dtype=np.float64)], axis=-1).reshape(-1, 3)
    rot = camera.pose[:3, :3]
    dirs = dirs_cam @ rot.T
    origins = np.broadcast_to(camera.position, dirs.shape)

    bvh = TriangleBvh(mesh.vertices, mesh.triangles)
    t, _ = bvh.cast(origins, dirs)
    # The camera-frame z component of every unnormalized direction is 1,
    # so the ray parameter is directly the z-depth.
    depth = t.reshape(h, w)

    if attributes_map is not None:
        hit = t > 0
        if hit.any():
            pts = origins[hit] + t[hit, None] * dirs[hit]
            vals, ok = query(attributes_map, pts)
            vals[~ok] = 0.0
            flat = props.reshape(-1, attributes_map.channels)
            flat[hit] = vals
            props = flat.reshape(h, w, attributes_map.channels)
    return depth, props


def sample_mesh_surface(mesh: Mesh, count: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted samples on a mesh surface (deterministic)."""
    if mesh.empty or mesh.triangles.shape[0] == 0:
        return np.zeros((0, 3))
    tri = mesh.vertices[mesh.triangles]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 3))
    rng = np.random.Generator(np.random.Philox(seed))
    pick = rng.choice(tri.shape[0], size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    su = np.sqrt(u)
    bary = np.stack([1.0 - su, su * (1.0 - v), su * v], axis=1)
    return np.einsum("nk,nkd->nd", bary, tri[pick])
