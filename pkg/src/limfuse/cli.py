"""Command-line front end for the mapping pipeline.

Subcommands: build-basis, reconstruct, mesh, colorize, render,
query-semantic, eval-synthetic.  stdout carries only machine-readable
output (CSV or JSON lines); progress and diagnostics go to stderr.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

Every flag has a config-file equivalent: pass ``--config file`` where the
file holds ``key=value`` lines keyed by the long flag name (without the
leading dashes); explicit flags take precedence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .encoder import EncodingConfig
from .evaluate import evaluate_scene_render, surface_metrics
from .gpis import GpisConfig, estimate_normals
from .ingest import (ParseError, load_color_png, load_depth_png, load_ply,
                     load_poses, make_synthetic_scene, read_kv_config,
                     save_color_png, save_depth_png, save_ply, unproject)
from .kernel import (EigenFloorError, KernelParams, build_anchor_basis,
                     load_basis, save_basis)
from .properties import (build_property_lim, classify_points,
                         load_feature_image, load_label_vectors)
from .surface import (Camera, Frame, build_local_surface_lim,
                      extract_sdf_grid, marching_cubes, raycast_render)
from .voxelmap import LatentImplicitMap, integrate, load_map, query, save_map

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# Voxel-size defaults per field: surface 5 cm, color 2 cm, everything else 10 cm.
DEFAULT_SURFACE_VOXEL = 0.05
DEFAULT_COLOR_VOXEL = 0.02
DEFAULT_PROPERTY_VOXEL = 0.10

_LABEL_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 190], [0, 128, 128], [170, 110, 40],
], dtype=np.uint8)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _log(msg: str = "") -> None:
    print(msg, file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _parse_manifest(path: Path):
    """Parse frame records: key=value tokens, one frame per line.

    A line consisting only of ``intrinsics=fx,fy,cx,cy,width,height`` sets
    the camera intrinsics for subsequent depth records.  Frame records use
    ``depth=`` or ``cloud=`` plus optional ``pose=`` (an index into the
    pose file, or 16 inline comma-separated floats) and named channel
    paths (``color=...``, ``feature=...``).
    """
    records = []
    intrinsics = None
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = {}
            for tok in line.split():
                if "=" not in tok:
                    raise ParseError(f"{path}:{lineno}: expected key=value, got {tok!r}")
                key, val = tok.split("=", 1)
                tokens[key] = val
            if set(tokens) == {"intrinsics"}:
                vals = [float(v) for v in tokens["intrinsics"].split(",")]
                if len(vals) != 6:
                    raise ParseError(f"{path}:{lineno}: intrinsics needs 6 values")
                intrinsics = vals
                continue
            if ("depth" in tokens) == ("cloud" in tokens):
                raise ParseError(f"{path}:{lineno}: record needs exactly one of depth=/cloud=")
            records.append((lineno, intrinsics, tokens))
    return records


def _resolve_pose(token, poses, path, lineno):
    if token is None:
        return np.eye(4)
    parts = token.split(",")
    if len(parts) == 16:
        return np.array([float(v) for v in parts]).reshape(4, 4)
    if len(parts) == 1:
        idx = int(parts[0])
        if poses is None:
            raise ParseError(f"{path}:{lineno}: pose index {idx} but no --poses file given")
        if not (0 <= idx < len(poses)):
            raise ParseError(f"{path}:{lineno}: pose index {idx} out of range ({len(poses)})")
        return poses[idx]
    raise ParseError(f"{path}:{lineno}: pose must be an index or 16 comma-separated floats")


def _load_channel(path: Path):
    suffix = path.suffix.lower()
    if suffix == ".png":
        return np.asarray(load_color_png(path))
    if suffix == ".bin":
        return load_feature_image(path)
    if suffix == ".npy":
        return np.load(path)
    raise ParseError(f"{path}: unsupported channel file type {suffix!r}")


def _frame_from_record(record, manifest_path: Path, poses, normals_k: int):
    lineno, intr, tokens = record
    base = manifest_path.parent
    pose = _resolve_pose(tokens.get("pose"), poses, manifest_path, lineno)
    channels = {k: v for k, v in tokens.items()
                if k not in ("depth", "cloud", "pose")}

    if "depth" in tokens:
        if intr is None:
            raise ParseError(f"{manifest_path}:{lineno}: depth record before intrinsics=")
        depth_path = base / tokens["depth"]
        if not depth_path.exists():
            raise FileNotFoundError(f"{manifest_path}:{lineno}: missing {depth_path}")
        depth = load_depth_png(depth_path)
        fx, fy, cx, cy, width, height = intr
        cam = Camera(fx, fy, cx, cy, int(width), int(height), pose)
        props = {}
        for name, rel in channels.items():
            props[name] = _load_channel(base / rel)
        frame = unproject(depth, cam, pose, props)
    else:
        cloud_path = base / tokens["cloud"]
        if not cloud_path.exists():
            raise FileNotFoundError(f"{manifest_path}:{lineno}: missing {cloud_path}")
        ply = load_ply(cloud_path)
        pts = ply.vertices.astype(np.float64) @ pose[:3, :3].T + pose[:3, 3]
        props = {}
        if ply.colors is not None:
            props["color"] = ply.colors.astype(np.float64) / 255.0
        for name, rel in channels.items():
            vals = _load_channel(base / rel)
            props[name] = vals.reshape(pts.shape[0], -1)
        normals = None
        if ply.normals is not None:
            normals = ply.normals.astype(np.float64) @ pose[:3, :3].T
        cam = Camera(500.0, 500.0, 320.0, 240.0, 640, 480, pose)
        frame = Frame(points=pts, normals=normals, properties=props, camera=cam)

    if frame.normals is None and len(frame) >= normals_k:
        frame.normals = estimate_normals(frame.points, k=normals_k,
                                         viewpoint=pose[:3, 3])
    return frame


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_build_basis(args) -> int:
    params = KernelParams(sigma=args.sigma, rho=args.rho)
    half = args.domain_half
    enc = build_anchor_basis(seed=args.seed, n_anchors=args.anchors,
                             domain=((-half,) * 3, (half,) * 3),
                             params=params, rank=args.rank)
    save_basis(enc, args.out)
    _log(f"wrote basis {args.out} ({enc.n_anchors} anchors, rank {enc.rank})")
    print("index,eigenvalue")
    for i, lam in enumerate(enc.eigenvalues):
        print(f"{i},{lam:.12g}")
    return EXIT_OK


def _build_frame_maps(frame, enc, args, channel_sizes):
    """Local maps for one frame; returns ({field: lim}, {field: seconds})."""
    maps, times = {}, {}
    t0 = time.perf_counter()
    maps["surface"] = build_local_surface_lim(
        frame, enc, GpisConfig(mode=args.gpis_mode, sample_distance=args.sample_distance),
        voxel_size=args.surface_voxel)
    times["surface"] = time.perf_counter() - t0
    for name, values in frame.properties.items():
        voxel = channel_sizes.get(name, args.property_voxel)
        kind = "feature" if values.shape[1] > 4 else "property"
        t0 = time.perf_counter()
        maps[name] = build_property_lim(frame, name, enc, voxel_size=voxel, kind=kind)
        times[name] = time.perf_counter() - t0
    return maps, times


def _cmd_reconstruct(args) -> int:
    enc = load_basis(args.basis)
    manifest = Path(args.frames)
    records = _parse_manifest(manifest)[::max(1, args.stride)]
    poses = load_poses(args.poses) if args.poses else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channel_sizes = {"color": args.color_voxel}

    globals_: dict[str, LatentImplicitMap] = {}
    for i, record in enumerate(records):
        try:
            frame = _frame_from_record(record, manifest, poses, args.normals_k)
        except FileNotFoundError as exc:
            _log(f"frame {i}: {exc}")
            raise
        local_maps, times = _build_frame_maps(frame, enc, args, channel_sizes)
        t0 = time.perf_counter()
        for field, lim in local_maps.items():
            if field in globals_:
                integrate(globals_[field], lim)
            else:
                globals_[field] = lim
        times["integrate"] = time.perf_counter() - t0
        _emit({"frame": i, "points": len(frame),
               **{f"{k}_s": round(v, 6) for k, v in times.items()}})

    outputs = {}
    for field, lim in globals_.items():
        path = out_dir / f"{field}.limm"
        save_map(lim, path)
        outputs[field] = {"path": str(path), "voxels": len(lim)}
    _emit({"frames": len(records), "maps": outputs})
    return EXIT_OK


def _cmd_mesh(args) -> int:
    enc = load_basis(args.basis)
    lim = load_map(args.map, enc)
    grid = extract_sdf_grid(lim, samples_per_voxel_axis=args.resolution,
                            boundary_trim=args.boundary_trim)
    mesh = marching_cubes(grid)
    save_ply(args.out, mesh.vertices, mesh.triangles, binary=not args.ascii)
    _emit({"vertices": int(mesh.vertices.shape[0]),
           "triangles": int(mesh.triangles.shape[0]), "out": args.out})
    return EXIT_OK


def _cmd_colorize(args) -> int:
    enc = load_basis(args.basis)
    lim = load_map(args.map, enc)
    ply = load_ply(args.mesh)
    mesh = ply.as_mesh()
    values, valid = query(lim, mesh.vertices)
    if lim.channels != 3:
        raise ValueError(f"colorize expects a 3-channel map, got {lim.channels}")
    colors = np.where(valid[:, None], np.clip(values, 0.0, 1.0), 0.0)
    save_ply(args.out, mesh.vertices, mesh.triangles, colors=colors,
             binary=not args.ascii)
    _emit({"vertices": int(mesh.vertices.shape[0]),
           "valid_fraction": float(valid.mean()) if valid.size else 0.0,
           "out": args.out})
    return EXIT_OK


def _camera_from_args(args) -> Camera:
    if args.pose is not None:
        vals = [float(v) for v in args.pose.split(",")]
        if len(vals) != 16:
            raise ValueError("--pose needs 16 comma-separated floats")
        pose = np.array(vals).reshape(4, 4)
    elif args.pose_file is not None:
        pose = load_poses(args.pose_file)[args.pose_index]
    else:
        pose = np.eye(4)
    return Camera(args.fx, args.fy, args.cx, args.cy, args.width, args.height, pose)


def _cmd_render(args) -> int:
    ply = load_ply(args.mesh)
    mesh = ply.as_mesh()
    camera = _camera_from_args(args)
    color_map = None
    if args.color_map:
        if not args.basis:
            raise ValueError("--color-map needs --basis")
        color_map = load_map(args.color_map, load_basis(args.basis))
    depth, color = raycast_render(mesh, color_map, camera)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth_path = out_dir / "depth.png"
    save_depth_png(depth_path, depth)
    outputs = {"depth": str(depth_path)}
    if color is not None:
        color_path = out_dir / "color.png"
        save_color_png(color_path, color)
        outputs["color"] = str(color_path)
    _emit({"hit_fraction": float((depth > 0).mean()), **outputs})
    return EXIT_OK


def _cmd_query_semantic(args) -> int:
    enc = load_basis(args.basis)
    lim = load_map(args.map, enc)
    names, vecs = load_label_vectors(args.labels)
    ply = load_ply(args.mesh)
    mesh = ply.as_mesh()
    labels, valid = classify_points(lim, mesh.vertices, vecs, names,
                                    threshold=args.threshold)
    palette = _LABEL_PALETTE[np.arange(len(names)) % len(_LABEL_PALETTE)]
    colors = np.full((mesh.vertices.shape[0], 3), 80, dtype=np.uint8)
    labeled = labels >= 0
    colors[labeled] = palette[labels[labeled]]
    save_ply(args.out, mesh.vertices, mesh.triangles, colors=colors,
             binary=not args.ascii)
    for i, name in enumerate(names):
        _emit({"label": name, "count": int((labels == i).sum())})
    _emit({"unlabeled": int((labels < 0).sum()), "out": args.out})
    return EXIT_OK


def _cmd_eval_synthetic(args) -> int:
    spec = read_kv_config(args.scene)
    kind = spec.get("scene", "sphere")
    density = float(spec.get("density", 2500.0))
    noise = float(spec.get("noise", 0.0))
    seed = int(spec.get("seed", 0))
    n_frames = int(spec.get("frames", 4))
    surface_voxel = float(spec.get("surface-voxel", DEFAULT_SURFACE_VOXEL))
    color_voxel = float(spec.get("color-voxel", DEFAULT_COLOR_VOXEL))
    resolution = int(spec.get("resolution", 8))
    scene = make_synthetic_scene(kind, density=density, noise_std=noise, seed=seed,
                                 n_frames=n_frames)
    enc = load_basis(args.basis) if args.basis else build_anchor_basis()

    surface_map = None
    color_map = None
    for i, frame in enumerate(scene.frames):
        t0 = time.perf_counter()
        local_s = build_local_surface_lim(frame, enc, voxel_size=surface_voxel)
        local_c = build_property_lim(frame, "color", enc, voxel_size=color_voxel)
        surface_map = local_s if surface_map is None else integrate(surface_map, local_s)
        color_map = local_c if color_map is None else integrate(color_map, local_c)
        _log(f"frame {i}: {len(frame)} pts in {time.perf_counter() - t0:.2f}s")

    grid = extract_sdf_grid(surface_map, samples_per_voxel_axis=resolution)
    mesh = marching_cubes(grid)
    geo = surface_metrics(mesh, scene, count=args.samples, threshold=args.threshold)
    rend = evaluate_scene_render(mesh, color_map, scene)

    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_ply(out_dir / "mesh.ply", mesh.vertices, mesh.triangles)
        depth, color = raycast_render(mesh, color_map, scene.camera)
        save_depth_png(out_dir / "depth.png", depth)
        if color is not None:
            save_color_png(out_dir / "color.png", color)
    _emit({"scene": kind, "voxels": {"surface": len(surface_map), "color": len(color_map)},
           **geo, **rend})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="limfuse", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-basis", help="sample anchors and write the encoding basis")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--anchors", type=_positive_int, default=256)
    p.add_argument("--rank", type=_positive_int, default=20)
    p.add_argument("--sigma", type=_positive_float, default=1.0)
    p.add_argument("--rho", type=_positive_float, default=0.5)
    p.add_argument("--domain-half", type=_positive_float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_basis)

    p = sub.add_parser("reconstruct", help="fuse a manifest of frames into global maps")
    p.add_argument("--frames", required=True, help="manifest file")
    p.add_argument("--basis", required=True)
    p.add_argument("--poses", default=None, help="pose file for pose-index records")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--surface-voxel", type=_positive_float, default=DEFAULT_SURFACE_VOXEL)
    p.add_argument("--color-voxel", type=_positive_float, default=DEFAULT_COLOR_VOXEL)
    p.add_argument("--property-voxel", type=_positive_float, default=DEFAULT_PROPERTY_VOXEL)
    p.add_argument("--stride", type=int, default=1, help="take every Nth frame")
    p.add_argument("--gpis-mode", choices=("sample", "derivative"), default="sample")
    p.add_argument("--sample-distance", type=float, default=0.1)
    p.add_argument("--normals-k", type=int, default=16)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("mesh", help="extract a mesh from a surface map")
    p.add_argument("--map", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=_positive_int, default=8, help="grid samples per voxel axis")
    p.add_argument("--boundary-trim", type=int, default=1)
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=_cmd_mesh)

    p = sub.add_parser("colorize", help="decode a property map onto mesh vertices")
    p.add_argument("--map", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=_cmd_colorize)

    p = sub.add_parser("render", help="ray-cast a mesh to depth (and color) images")
    p.add_argument("--mesh", required=True)
    p.add_argument("--color-map", default=None)
    p.add_argument("--basis", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--fx", type=float, default=500.0)
    p.add_argument("--fy", type=float, default=500.0)
    p.add_argument("--cx", type=float, default=320.0)
    p.add_argument("--cy", type=float, default=240.0)
    p.add_argument("--pose", default=None, help="16 comma-separated floats (camera-to-world)")
    p.add_argument("--pose-file", default=None)
    p.add_argument("--pose-index", type=int, default=0)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("query-semantic", help="label mesh vertices against a feature map")
    p.add_argument("--map", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--labels", required=True, help="label-vector text file")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=_cmd_query_semantic)

    p = sub.add_parser("eval-synthetic", help="score the pipeline on an analytic scene")
    p.add_argument("--scene", required=True, help="scene spec file (key=value)")
    p.add_argument("--basis", default=None, help="basis artifact (default: built-in defaults)")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--threshold", type=float, default=0.025)
    p.add_argument("--samples", type=int, default=100000)
    p.set_defaults(func=_cmd_eval_synthetic)
    return parser


def _apply_config(argv: list) -> list:
    """Splice config-file entries in as flags ahead of the explicit ones."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise _UsageError("--config needs a file argument")
    conf = read_kv_config(argv[idx + 1])
    rest = argv[:idx] + argv[idx + 2:]
    if not rest:
        raise _UsageError("--config given without a subcommand")
    extra = []
    for key, val in conf.items():
        if val.lower() in ("true", "yes", "1") and key in ("ascii",):
            extra.append(f"--{key}")
        else:
            extra.append(f"--{key}={val}")
    return [rest[0]] + extra + rest[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        argv = _apply_config(argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        _log(f"usage error: {exc}")
        return EXIT_USAGE
    except (EigenFloorError, np.linalg.LinAlgError) as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (OSError, ParseError, ValueError, KeyError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
