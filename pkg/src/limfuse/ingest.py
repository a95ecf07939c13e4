"""Data ingestion, synthetic scenes with analytic ground truth, and oracles.

The synthetic scenes (sphere, box, room) exist so the whole pipeline can be
exercised and scored against closed-form geometry: each scene exposes a
free-space-positive SDF, exact normals, a procedural color function, and an
analytic ray caster.  The exact GPR oracle is the brute-force reference the
test suite compares the decoupled encoder against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from .kernel import KernelParams, matern_72
from .surface import Camera, Frame, Mesh


class ParseError(ValueError):
    """Malformed input file; message carries the offending location."""


# ---------------------------------------------------------------------------
# depth unprojection
# ---------------------------------------------------------------------------

def unproject(depth_img: np.ndarray, intrinsics: Camera, pose: np.ndarray | None = None,
              properties: dict | None = None, depth_unit: str | None = None) -> Frame:
    """Back-project a depth image into a posed world-space frame.

    Depth units are detected from dtype: uint16 is millimeters, float32/64
    is meters; anything else needs an explicit ``depth_unit`` ("mm" or
    "m").  Zero-depth pixels are dropped.  Property images are sampled at
    the same pixels; uint8 channels are scaled to [0, 1].

    Parameters
    ----------
    depth_img : (H, W) array
    intrinsics : Camera
        Pinhole parameters; its pose is used unless ``pose`` overrides it.
    pose : optional 4x4 camera-to-world transform
    properties : optional {name: (H, W) or (H, W, C) array}
    """
    depth = np.asarray(depth_img)
    if depth.ndim != 2:
        raise ValueError(f"depth image must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    if h != intrinsics.height or w != intrinsics.width:
        raise ValueError(f"depth is {w}x{h} but intrinsics say "
                         f"{intrinsics.width}x{intrinsics.height}")
    if depth_unit is None:
        if depth.dtype == np.uint16:
            depth_unit = "mm"
        elif depth.dtype in (np.float32, np.float64):
            depth_unit = "m"
        else:
            raise ValueError(f"ambiguous depth dtype {depth.dtype}; pass depth_unit")
    if depth_unit not in ("mm", "m"):
        raise ValueError(f"depth_unit must be 'mm' or 'm', got {depth_unit!r}")
    z = depth.astype(np.float64) * (0.001 if depth_unit == "mm" else 1.0)

    vs, us = np.nonzero(z > 0)
    zz = z[vs, us]
    xs = (us - intrinsics.cx) * zz / intrinsics.fx
    ys = (vs - intrinsics.cy) * zz / intrinsics.fy
    pts_cam = np.stack([xs, ys, zz], axis=1)

    if pose is None:
        pose = intrinsics.pose
    pose = np.asarray(pose, dtype=np.float64).reshape(4, 4)
    pts = pts_cam @ pose[:3, :3].T + pose[:3, 3]

    sampled = {}
    for name, img in (properties or {}).items():
        img = np.asarray(img)
        if img.shape[:2] != (h, w):
            raise ValueError(f"channel {name!r} is {img.shape[:2]}, depth is {(h, w)}")
        vals = img[vs, us]
        if img.dtype == np.uint8:
            vals = vals.astype(np.float64) / 255.0
        else:
            vals = vals.astype(np.float64)
        sampled[name] = vals

    camera = Camera(intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
                    intrinsics.width, intrinsics.height, pose)
    return Frame(points=pts, properties=sampled, camera=camera)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from eye toward target (z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def fibonacci_sphere(count: int) -> np.ndarray:
    """Deterministic, nearly equal-area unit-sphere sample (spiral lattice)."""
    i = np.arange(count)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - (2.0 * i + 1.0) / count
    rad = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = golden * i
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


# All synthetic geometry is shifted off the voxel lattice: surfaces that
# coincide exactly with voxel faces (a sphere of radius 1.0 on a 5 cm grid,
# walls on grid planes) are a degenerate worst case that real scans never
# produce, and they starve the boundary cells of the meshing grid.
SCENE_OFFSET = np.array([0.0131, 0.0077, 0.0193])


def _grid_face(center, u_axis, v_axis, u_half, v_half, normal, density):
    """Deterministic lattice over one rectangular face; returns (pts, normals)."""
    area = 4.0 * u_half * v_half
    count = max(1, int(round(area * density)))
    nu = max(1, int(round(np.sqrt(count * u_half / v_half))))
    nv = max(1, int(round(count / nu)))
    us = (np.arange(nu) + 0.5) / nu * 2.0 * u_half - u_half
    vs = (np.arange(nv) + 0.5) / nv * 2.0 * v_half - v_half
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    pts = (np.asarray(center)[None, :]
           + uu.reshape(-1, 1) * np.asarray(u_axis)[None, :]
           + vv.reshape(-1, 1) * np.asarray(v_axis)[None, :])
    nrm = np.tile(np.asarray(normal, dtype=np.float64), (pts.shape[0], 1))
    return pts, nrm


def _box_faces(center, half, density, inward=False):
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)
    pts, nrm = [], []
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1.0, 1.0):
            n = np.zeros(3)
            n[axis] = sign if not inward else -sign
            face_center = center.copy()
            face_center[axis] += sign * half[axis]
            ua, va = np.zeros(3), np.zeros(3)
            ua[u], va[v] = 1.0, 1.0
            p, s = _grid_face(face_center, ua, va, half[u], half[v], n, density)
            pts.append(p)
            nrm.append(s)
    return np.vstack(pts), np.vstack(nrm)


def _sdf_box(points, center, half):
    """Conventional box SDF: negative inside the box."""
    q = np.abs(points - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def default_color_fn(points: np.ndarray) -> np.ndarray:
    """Smooth procedural RGB in [0.05, 0.95] as a function of position."""
    p = np.atleast_2d(points)
    freq = np.array([[1.3, 0.4, 0.2], [0.3, 1.1, 0.5], [0.2, 0.5, 0.9]])
    phase = np.array([0.0, 2.0, 4.0])
    return 0.5 + 0.45 * np.sin(p @ freq.T + phase)


@dataclass
class SyntheticScene:
    """Sampled surface frames plus the analytic oracles that generated them."""

    name: str
    frames: list
    sdf: object                 # callable (N, 3) -> (N,), positive in free space
    color: object               # callable (N, 3) -> (N, 3) in [0, 1]
    camera: Camera
    _surfaces: list = field(default_factory=list, repr=False)
    _primitives: list = field(default_factory=list, repr=False)

    def sample_surface(self, count: int, seed: int = 0) -> np.ndarray:
        """Uniform random samples on the true free-space boundary."""
        rng = np.random.Generator(np.random.Philox(seed))
        areas = np.array([s["area"] for s in self._surfaces])
        picks = rng.choice(len(self._surfaces), size=4 * count, p=areas / areas.sum())
        pts = np.empty((4 * count, 3))
        for i, surf in enumerate(self._surfaces):
            sel = picks == i
            if sel.any():
                pts[sel] = surf["sample"](rng, int(sel.sum()))
        keep = np.abs(self.sdf(pts)) < 1e-6
        pts = pts[keep]
        if pts.shape[0] < count:
            raise RuntimeError("surface sampling starved; raise the oversampling factor")
        return pts[:count]


def _sphere_sampler(center, radius):
    center = np.asarray(center, dtype=np.float64)

    def sample(rng, n):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return center + radius * d

    return {"area": 4.0 * np.pi * radius**2, "sample": sample}


def _box_sampler(center, half):
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)
    faces = []
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1.0, 1.0):
            faces.append((axis, u, v, sign, 4.0 * half[u] * half[v]))
    areas = np.array([f[4] for f in faces])

    def sample(rng, n):
        pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
        pts = np.empty((n, 3))
        for i, (axis, u, v, sign, _) in enumerate(faces):
            sel = pick == i
            m = int(sel.sum())
            if not m:
                continue
            p = np.tile(center, (m, 1))
            p[:, axis] += sign * half[axis]
            p[:, u] += rng.uniform(-half[u], half[u], m)
            p[:, v] += rng.uniform(-half[v], half[v], m)
            pts[sel] = p
        return pts

    return {"area": float(areas.sum()), "sample": sample}


def _split_frames(points, normals, colors, n_frames, camera, mode="roundrobin",
                  center=None):
    """Partition one cloud into frames.

    Round-robin keeps full coverage in every frame (a repeated scan of the
    same view); sector mode slices by azimuth around ``center`` so each
    frame holds one region at full local density (a sensor sweeping the
    scene).
    """
    frames = []
    if mode == "sector" and n_frames > 1:
        angles = np.arctan2(points[:, 1] - center[1], points[:, 0] - center[0])
        bins = np.floor((angles + np.pi) / (2 * np.pi) * n_frames).astype(int)
        bins = np.clip(bins, 0, n_frames - 1)
        for i in range(n_frames):
            sel = bins == i
            frames.append(Frame(points=points[sel], normals=normals[sel],
                                properties={"color": colors[sel]}, camera=camera))
    else:
        for i in range(n_frames):
            sel = slice(i, None, n_frames)
            frames.append(Frame(points=points[sel], normals=normals[sel],
                                properties={"color": colors[sel]}, camera=camera))
    return frames


def make_synthetic_scene(kind: str = "sphere", density: float = 2500.0,
                         noise_std: float = 0.0, color_fn=None,
                         seed: int = 0, n_frames: int = 4) -> SyntheticScene:
    """Build a synthetic scene with frames and analytic oracles.

    ``density`` is surface points per square meter.  Surface positions are
    deterministic lattices; optional Gaussian position noise is drawn from
    a counter-based generator keyed on ``seed``.  Normals are the exact
    analytic ones (of the noiseless positions).
    """
    if color_fn is None:
        color_fn = default_color_fn
    if density <= 0:
        raise ValueError(f"density must be positive, got {density}")
    rng = np.random.Generator(np.random.Philox(seed))

    if kind == "sphere":
        radius = 1.0
        center = SCENE_OFFSET.copy()
        count = max(16, int(round(density * 4.0 * np.pi * radius**2)))
        pts = center + fibonacci_sphere(count) * radius
        nrm = (pts - center) / radius
        camera = Camera(300.0, 300.0, 160.0, 120.0, 320, 240,
                        look_at(center + (0.0, -2.6, 1.2), center))

        def sdf(p):
            return np.linalg.norm(np.atleast_2d(p) - center, axis=1) - radius

        surfaces = [_sphere_sampler(center, radius)]
        primitives = [("sphere", center, radius, "enter")]

    elif kind == "box":
        half = np.array([0.6, 0.5, 0.4])
        center = SCENE_OFFSET.copy()
        pts, nrm = _box_faces(center, half, density)
        camera = Camera(300.0, 300.0, 160.0, 120.0, 320, 240,
                        look_at(center + (1.8, -1.6, 1.3), center))

        def sdf(p):
            return _sdf_box(np.atleast_2d(p), center, half)

        surfaces = [_box_sampler(center, half)]
        primitives = [("box", center, half, "enter")]

    elif kind == "room":
        room_c = SCENE_OFFSET + np.array([0.0, 0.0, 1.25])
        room_h = np.array([2.0, 1.5, 1.25])
        objs = [
            ("sphere", SCENE_OFFSET + np.array([1.0, 0.55, 0.45]), 0.45),
            ("box", SCENE_OFFSET + np.array([-1.1, -0.6, 0.25]),
             np.array([0.45, 0.35, 0.26])),
            ("box", SCENE_OFFSET + np.array([-1.3, 0.9, 0.9]),
             np.array([0.18, 0.18, 0.91])),
        ]
        shell_p, shell_n = _box_faces(room_c, room_h, density, inward=True)
        parts_p, parts_n = [shell_p], [shell_n]
        sphere_pts = fibonacci_sphere(max(16, int(round(density * 4 * np.pi * objs[0][2]**2))))
        parts_p.append(objs[0][1] + objs[0][2] * sphere_pts)
        parts_n.append(sphere_pts)
        for _, c, h in [objs[1], objs[2]]:
            p, s = _box_faces(c, h, density)
            parts_p.append(p)
            parts_n.append(s)
        pts = np.vstack(parts_p)
        nrm = np.vstack(parts_n)

        def sdf(p):
            p = np.atleast_2d(p)
            vals = -_sdf_box(p, room_c, room_h)
            vals = np.minimum(vals, np.linalg.norm(p - objs[0][1], axis=1) - objs[0][2])
            for _, c, h in [objs[1], objs[2]]:
                vals = np.minimum(vals, _sdf_box(p, c, h))
            return vals

        keep = np.abs(sdf(pts)) < 1e-9
        pts, nrm = pts[keep], nrm[keep]
        camera = Camera(180.0, 180.0, 120.0, 90.0, 240, 180,
                        look_at(SCENE_OFFSET + (1.35, -0.95, 1.55),
                                SCENE_OFFSET + (-0.8, 0.5, 0.7)))
        surfaces = [dict(_box_sampler(room_c, room_h)),
                    _sphere_sampler(objs[0][1], objs[0][2]),
                    _box_sampler(objs[1][1], objs[1][2]),
                    _box_sampler(objs[2][1], objs[2][2])]
        primitives = [("box", room_c, room_h, "exit"),
                      ("sphere", objs[0][1], objs[0][2], "enter"),
                      ("box", objs[1][1], objs[1][2], "enter"),
                      ("box", objs[2][1], objs[2][2], "enter")]
    else:
        raise ValueError(f"unknown scene kind {kind!r} (want sphere, box or room)")

    if noise_std > 0:
        pts = pts + rng.normal(scale=noise_std, size=pts.shape)
    colors = np.clip(color_fn(pts), 0.0, 1.0)
    split_mode = "sector" if kind == "room" else "roundrobin"
    split_center = room_c if kind == "room" else SCENE_OFFSET
    frames = _split_frames(pts, nrm, colors, n_frames, camera,
                           mode=split_mode, center=split_center)
    return SyntheticScene(name=kind, frames=frames, sdf=sdf, color=color_fn,
                          camera=camera, _surfaces=surfaces, _primitives=primitives)


def analytic_render(scene: SyntheticScene, camera: Camera | None = None):
    """Ray-cast the scene's exact geometry: (depth, color) ground truth images.

    Depth is camera-frame z in meters (0 on miss); color evaluates the
    scene's color function at the exact hit points.
    """
    cam = camera if camera is not None else scene.camera
    h, w = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack([(us - cam.cx) / cam.fx,
                         (vs - cam.cy) / cam.fy,
                         np.ones_like(us, dtype=np.float64)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ cam.pose[:3, :3].T
    origin = cam.position
    t_best = np.full(dirs.shape[0], np.inf)

    for prim in scene._primitives:
        if prim[0] == "sphere":
            _, center, radius, mode = prim
            oc = origin - center
            b = np.einsum("nd,d->n", dirs, oc)
            a = np.einsum("nd,nd->n", dirs, dirs)
            disc = b * b - a * (oc @ oc - radius**2)
            ok = disc >= 0
            sq = np.sqrt(np.maximum(disc, 0))
            t1 = (-b - sq) / a
            t2 = (-b + sq) / a
            t = np.where(t1 > 1e-9, t1, t2) if mode == "enter" else t2
            t = np.where(ok & (t > 1e-9), t, np.inf)
        else:
            _, center, half, mode = prim
            lo = np.asarray(center) - np.asarray(half)
            hi = np.asarray(center) + np.asarray(half)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                ta = (lo[None, :] - origin[None, :]) * inv
                tb = (hi[None, :] - origin[None, :]) * inv
            tmin = np.nanmax(np.minimum(ta, tb), axis=1)
            tmax = np.nanmin(np.maximum(ta, tb), axis=1)
            hit = tmax >= np.maximum(tmin, 0)
            t = tmin if mode == "enter" else tmax
            t = np.where(hit & (t > 1e-9), t, np.inf)
        t_best = np.minimum(t_best, t)

    hit = np.isfinite(t_best)
    depth = np.where(hit, t_best, 0.0).reshape(h, w)
    color = np.zeros((h * w, 3))
    if hit.any():
        color[hit] = np.clip(scene.color(origin + t_best[hit, None] * dirs[hit]), 0, 1)
    return depth, color.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# exact regression oracle
# ---------------------------------------------------------------------------

def exact_gpr_oracle(train_x: np.ndarray, train_y: np.ndarray, query_x: np.ndarray,
                     params: KernelParams, noise: float) -> np.ndarray:
    """Brute-force regression mean with the exact (non-approximated) kernel.

    Literally K_*X (K_XX + noise^2 I)^-1 Y.  Cubic in N and capped at
    N = 5000: this exists as a test reference, not a production path.
    """
    x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
    n = x.shape[0]
    if n > 5000:
        raise ValueError(f"oracle is O(N^3); refusing N={n} > 5000")
    y = np.asarray(train_y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    gram = matern_72(cdist(x, x), params)
    gram[np.diag_indices(n)] += noise * noise
    cross = matern_72(cdist(np.atleast_2d(query_x), x), params)
    return cross @ np.linalg.solve(gram, y)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def save_ply(path, vertices: np.ndarray, triangles: np.ndarray | None = None,
             normals: np.ndarray | None = None, colors: np.ndarray | None = None,
             binary: bool = True) -> None:
    """Write a point cloud or mesh as PLY (binary little-endian or ASCII).

    Positions (and normals) are float32; colors are uchar RGB, accepted
    either as float in [0, 1] (clamped at this boundary) or as uint8.
    """
    verts = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    n = verts.shape[0]
    cols = None
    if colors is not None:
        cols = np.asarray(colors)
        if cols.dtype != np.uint8:
            cols = (np.clip(cols, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        cols = cols.reshape(-1, 3)
        if cols.shape[0] != n:
            raise ValueError(f"{n} vertices but {cols.shape[0]} colors")
    nrms = None
    if normals is not None:
        nrms = np.asarray(normals, dtype=np.float32).reshape(-1, 3)
        if nrms.shape[0] != n:
            raise ValueError(f"{n} vertices but {nrms.shape[0]} normals")

    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if nrms is not None:
        header += ["property float nx", "property float ny", "property float nz"]
    if cols is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    tris = None
    if triangles is not None:
        tris = np.asarray(triangles, dtype=np.int32).reshape(-1, 3)
        header += [f"element face {tris.shape[0]}",
                   "property list uchar int vertex_indices"]
    header.append("end_header")

    fields = [("xyz", "<f4", 3)]
    if nrms is not None:
        fields.append(("n", "<f4", 3))
    if cols is not None:
        fields.append(("rgb", "u1", 3))
    rec = np.empty(n, dtype=np.dtype(fields))
    rec["xyz"] = verts
    if nrms is not None:
        rec["n"] = nrms
    if cols is not None:
        rec["rgb"] = cols

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(rec.tobytes())
            if tris is not None:
                face_rec = np.empty(tris.shape[0], dtype=np.dtype([("k", "u1"), ("v", "<i4", 3)]))
                face_rec["k"] = 3
                face_rec["v"] = tris
                f.write(face_rec.tobytes())
        else:
            for i in range(n):
                row = " ".join(f"{v:.9g}" for v in rec["xyz"][i])
                if nrms is not None:
                    row += " " + " ".join(f"{v:.9g}" for v in rec["n"][i])
                if cols is not None:
                    row += " " + " ".join(str(int(v)) for v in rec["rgb"][i])
                f.write((row + "\n").encode("ascii"))
            if tris is not None:
                for t in tris:
                    f.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))


@dataclass
class PlyContents:
    vertices: np.ndarray
    triangles: np.ndarray | None
    normals: np.ndarray | None
    colors: np.ndarray | None          # uint8 RGB as stored

    def as_mesh(self) -> Mesh:
        tris = self.triangles if self.triangles is not None else np.zeros((0, 3), np.int64)
        attrs = {}
        if self.colors is not None:
            attrs["color"] = self.colors.astype(np.float64) / 255.0
        if self.normals is not None:
            attrs["normal"] = self.normals.astype(np.float64)
        return Mesh(self.vertices.astype(np.float64), tris, attrs)


def load_ply(path) -> PlyContents:
    """Read ASCII or binary-little-endian PLY with the properties save_ply writes."""
    with open(path, "rb") as f:
        raw = f.read()

    lines = []
    off = 0
    while True:
        nl = raw.find(b"\n", off)
        if nl < 0:
            raise ParseError(f"{path}: header without end_header")
        line = raw[off:nl].decode("ascii", "replace").strip()
        off = nl + 1
        lines.append(line)
        if line == "end_header":
            break
    if not lines or lines[0] != "ply":
        raise ParseError(f"{path}:1: not a PLY file")

    binary = None
    n_verts = n_faces = 0
    vert_props = []
    current = None
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] == "ascii":
                binary = False
            elif parts[1] == "binary_little_endian":
                binary = True
            else:
                raise ParseError(f"{path}:{lineno}: unsupported format {parts[1]!r}")
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_verts = int(parts[2])
            elif current == "face":
                n_faces = int(parts[2])
            else:
                raise ParseError(f"{path}:{lineno}: unsupported element {current!r}")
        elif parts[0] == "property":
            if current == "vertex":
                if parts[1] not in ("float", "float32", "uchar", "uint8"):
                    raise ParseError(f"{path}:{lineno}: unsupported vertex property type {parts[1]!r}")
                vert_props.append((parts[-1], parts[1]))
            elif current == "face":
                if parts[1] != "list":
                    raise ParseError(f"{path}:{lineno}: face property must be a list")
        elif parts[0] == "end_header":
            break
        else:
            raise ParseError(f"{path}:{lineno}: unexpected header line {line!r}")
    if binary is None:
        raise ParseError(f"{path}: missing format line")

    names = [p[0] for p in vert_props]
    for needed in ("x", "y", "z"):
        if needed not in names:
            raise ParseError(f"{path}: vertex element lacks property {needed!r}")
    has_normals = all(k in names for k in ("nx", "ny", "nz"))
    has_colors = all(k in names for k in ("red", "green", "blue"))

    fields = []
    for name, typ in vert_props:
        fields.append((name, "<f4" if typ in ("float", "float32") else "u1"))
    vert_dtype = np.dtype(fields)

    if binary:
        need = n_verts * vert_dtype.itemsize
        if len(raw) - off < need:
            raise ParseError(f"{path}: truncated vertex data "
                             f"({len(raw) - off} bytes for {n_verts} vertices)")
        rec = np.frombuffer(raw, dtype=vert_dtype, count=n_verts, offset=off)
        off += need
        tris = None
        if n_faces:
            face_dtype = np.dtype([("k", "u1"), ("v", "<i4", 3)])
            need = n_faces * face_dtype.itemsize
            if len(raw) - off < need:
                raise ParseError(f"{path}: truncated face data")
            face_rec = np.frombuffer(raw, dtype=face_dtype, count=n_faces, offset=off)
            if np.any(face_rec["k"] != 3):
                raise ParseError(f"{path}: only triangular faces are supported")
            tris = face_rec["v"].astype(np.int64)
    else:
        body = raw[off:].decode("ascii", "replace").splitlines()
        header_lines = len(lines)
        if len(body) < n_verts + n_faces:
            raise ParseError(f"{path}: expected {n_verts + n_faces} data rows, "
                             f"got {len(body)}")
        rec = np.empty(n_verts, dtype=vert_dtype)
        for i in range(n_verts):
            parts = body[i].split()
            if len(parts) != len(vert_props):
                raise ParseError(f"{path}:{header_lines + i + 1}: expected "
                                 f"{len(vert_props)} values, got {len(parts)}")
            try:
                for (name, typ), val in zip(vert_props, parts):
                    rec[name][i] = float(val) if typ in ("float", "float32") else int(val)
            except ValueError as exc:
                raise ParseError(f"{path}:{header_lines + i + 1}: bad value") from exc
        tris = None
        if n_faces:
            tris = np.empty((n_faces, 3), dtype=np.int64)
            for i in range(n_faces):
                parts = body[n_verts + i].split()
                if len(parts) != 4 or parts[0] != "3":
                    raise ParseError(f"{path}:{header_lines + n_verts + i + 1}: "
                                     f"only triangular faces are supported")
                tris[i] = [int(v) for v in parts[1:]]

    verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float32)
    normals = None
    if has_normals:
        normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float32)
    colors = None
    if has_colors:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.uint8)
    return PlyContents(verts, tris, normals, colors)


# ---------------------------------------------------------------------------
# poses, images, config files
# ---------------------------------------------------------------------------

def load_poses(path) -> np.ndarray:
    """Read a pose file: 16 floats per line (row-major 4x4) or TUM records.

    TUM lines are ``timestamp tx ty tz qx qy qz qw``; the format is
    auto-detected from the token count.  Comment lines start with '#'.
    """
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad float") from exc
            if len(vals) == 16:
                poses.append(np.array(vals).reshape(4, 4))
            elif len(vals) == 8:
                t = np.array(vals[1:4])
                quat = np.array(vals[4:8])        # qx qy qz qw
                pose = np.eye(4)
                pose[:3, :3] = Rotation.from_quat(quat).as_matrix()
                pose[:3, 3] = t
                poses.append(pose)
            else:
                raise ParseError(f"{path}:{lineno}: expected 16 (matrix) or "
                                 f"8 (TUM) values, got {len(vals)}")
    return np.array(poses).reshape(-1, 4, 4)


def save_depth_png(path, depth_m: np.ndarray) -> None:
    """Write depth in meters as a 16-bit PNG in millimeters."""
    mm = np.clip(np.asarray(depth_m) * 1000.0, 0, 65535).round().astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth_png(path) -> np.ndarray:
    """Read adepth PNG back as uint16 millimeters."""
    return np.asarray(Image.open(path)).astype(np.uint16)


def save_color_png(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) image; floats are treated as [0, 1] and clamped."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(img).save(path)


def load_color_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def read_kv_config(path) -> dict:
    """Parse a key=value text file ('#' comments, blank lines allowed)."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out
