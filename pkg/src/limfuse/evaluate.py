"""Reconstruction scoring against synthetic ground truth.

Geometry follows the two-sided sampled protocol: uniform samples are drawn
from the reconstructed mesh and from the true surface, and accuracy /
completeness are the fractions of nearest-neighbor distances under the
threshold (F1 is their harmonic mean).  Renders are scored as depth L1 and
color PSNR over pixels valid in both images (holes are excluded: the map
does not fill what it never observed).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .ingest import SyntheticScene, analytic_render
from .surface import Camera, Mesh, raycast_render, sample_mesh_surface
from .voxelmap import LatentImplicitMap


def surface_metrics(mesh: Mesh, scene: SyntheticScene, count: int = 100000,
                    threshold: float = 0.025, seed: int = 11) -> dict:
    """Accuracy / completeness / F1 of a mesh against the scene's surface."""
    if mesh.empty or mesh.triangles.shape[0] == 0:
        return {"accuracy": 0.0, "completeness": 0.0, "f1": 0.0,
                "threshold_m": threshold, "samples": count}
    mesh_pts = sample_mesh_surface(mesh, count, seed=seed)
    true_pts = scene.sample_surface(count, seed=seed + 1)
    accuracy = float((cKDTree(true_pts).query(mesh_pts, k=1)[0] < threshold).mean())
    completeness = float((cKDTree(mesh_pts).query(true_pts, k=1)[0] < threshold).mean())
    f1 = 0.0
    if accuracy + completeness > 0:
        f1 = 2.0 * accuracy * completeness / (accuracy + completeness)
    return {"accuracy": accuracy, "completeness": completeness, "f1": f1,
            "threshold_m": threshold, "samples": count}


def render_metrics(depth: np.ndarray, color: np.ndarray | None,
                   gt_depth: np.ndarray, gt_color: np.ndarray | None) -> dict:
    """Depth L1 (meters) and color PSNR (dB) over jointly valid pixels.

    A pixel participates when both renders hit geometry; for color it must
    also carry a decoded value (non-black where depth hit).  PSNR uses a
    [0, 1] peak.
    """
    both = (depth > 0) & (gt_depth > 0)
    out = {"valid_fraction": float(both.mean()) if both.size else 0.0}
    if not both.any():
        out.update({"depth_l1_m": float("nan"), "psnr_db": float("nan")})
        return out
    out["depth_l1_m"] = float(np.abs(depth[both] - gt_depth[both]).mean())
    if color is not None and gt_color is not None:
        colored = both & np.any(color > 0, axis=-1)
        out["color_fraction"] = float(colored.mean())
        if colored.any():
            err = color[colored] - gt_color[colored]
            mse = float(np.mean(err * err))
            out["psnr_db"] = float("inf") if mse == 0 else float(-10.0 * np.log10(mse))
        else:
            out["psnr_db"] = float("nan")
    return out


def evaluate_scene_render(mesh: Mesh, color_map: LatentImplicitMap | None,
                          scene: SyntheticScene, camera: Camera | None = None) -> dict:
    """Render the reconstruction and score it against the analytic render."""
    cam = camera if camera is not None else scene.camera
    depth, color = raycast_render(mesh, color_map, cam)
    gt_depth, gt_color = analytic_render(scene, cam)
    return render_metrics(depth, color, gt_depth, gt_color)
