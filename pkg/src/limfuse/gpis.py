"""Implicit-surface regression problems from oriented surface points.

Surface points all sit on the zero level, which is not enough to pin down
a signed distance field.  Two standard constructions add the missing
information: offsetting samples along the normals with signed labels, or
regressing the field and its spatial gradient jointly (the gradient targets
being the normals).  Sign convention here: positive in free space, so the
field grows along the outward normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .encoder import EncodingConfig, LatentFeature, EmptyVoxelError, solve_latent
from .kernel import PositionalEncoder, posi_encode, posi_encode_deriv

MODES = ("sample", "derivative")


@dataclass
class GpisConfig:
    mode: str = "sample"
    sample_distance: float = 0.1      # in normalized voxel coordinates
    samples_per_point: int = 2        # one positive, one negative offset

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0.0 < self.sample_distance < 0.5):
            raise ValueError(f"sample_distance must be in (0, 0.5), got {self.sample_distance}")
        if self.mode == "sample" and self.samples_per_point != 2:
            raise ValueError("sample mode offsets each point once per side (2 samples)")


@dataclass
class OrientedPoints:
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] != self.normals.shape[0]:
            raise ValueError(f"{self.points.shape[0]} points vs {self.normals.shape[0]} normals")
        if self.points.shape[0]:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                worst = float(np.abs(norms - 1.0).max())
                raise ValueError(f"normals must be unit length (worst deviation {worst:.2e})")

    def __len__(self) -> int:
        return self.points.shape[0]


def estimate_normals(points: np.ndarray, k: int = 16, viewpoint=(0.0, 0.0, 0.0),
                     return_degenerate: bool = False):
    """Per-point normals from the smallest covariance direction of k neighbors.

    Normals are flipped to face the viewpoint (the sensor origin), which
    makes them point into free space.  Degenerate neighborhoods (zero
    covariance, e.g. k coincident points) get the direction toward the
    viewpoint instead; pass ``return_degenerate=True`` to obtain the flag
    array alongside.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if k < 3:
        raise ValueError(f"need k >= 3 neighbors, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)

    _, idx = cKDTree(pts).query(pts, k=k)
    nbrs = pts[idx]                                   # (n, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigval, eigvec = np.linalg.eigh(cov)              # ascending per neighborhood
    normals = eigvec[:, :, 0]

    degenerate = eigval[:, 2] <= 1e-30
    if np.any(degenerate):
        fallback = vp[None, :] - pts[degenerate]
        nrm = np.linalg.norm(fallback, axis=1, keepdims=True)
        nrm[nrm == 0] = 1.0
        normals[degenerate] = fallback / nrm

    flip = np.einsum("ni,ni->n", normals, vp[None, :] - pts) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if return_degenerate:
        return normals, degenerate
    return normals


def extend_samples(op: OrientedPoints, d: float):
    """Offset each surface point both ways along its normal.

    Returns (X_ext, y_ext) with 3N rows: the originals labeled exactly 0,
    then the +d offsets labeled +d, then the -d offsets labeled -d.
    Positive distance lies along the outward normal (free space).
    """
    n = len(op)
    x_ext = np.vstack([op.points,
                       op.points + d * op.normals,
                       op.points - d * op.normals])
    y_ext = np.concatenate([np.zeros(n), np.full(n, d), np.full(n, -d)])
    return x_ext, y_ext


def encode_surface_sample(enc: PositionalEncoder, op: OrientedPoints, d: float = 0.1,
                          cfg: EncodingConfig | None = None) -> LatentFeature:
    """Sample-based surface latent: extend along normals, then ridge-encode."""
    if cfg is None:
        cfg = EncodingConfig.for_kind("sdf")
    if len(op) < cfg.min_points:
        raise EmptyVoxelError(f"{len(op)} points < min_points={cfg.min_points}")
    x_ext, y_ext = extend_samples(op, d)
    feats = posi_encode(enc, x_ext)
    return LatentFeature(solve_latent(feats, y_ext[:, None], cfg.noise), kind="sdf")


def build_derivative_design(enc: PositionalEncoder, op: OrientedPoints):
    """Stacked design for derivative-based regression.

    Columns are [values | d/dx | d/dy | d/dz] evaluated at the points, so
    the design is rank x 4N; targets pair zeros with the normal components.
    """
    n = len(op)
    cols = np.vstack([posi_encode(enc, op.points),
                      posi_encode_deriv(enc, op.points, 1),
                      posi_encode_deriv(enc, op.points, 2),
                      posi_encode_deriv(enc, op.points, 3)])   # (4N, rank)
    targets = np.concatenate([np.zeros(n), op.normals[:, 0],
                              op.normals[:, 1], op.normals[:, 2]])
    return cols.T, targets


def encode_surface_derivative(enc: PositionalEncoder, op: OrientedPoints,
                              cfg: EncodingConfig | None = None) -> LatentFeature:
    """Derivative-based surface latent: joint fit of values and gradients.

    The returned latent decodes field values through the ordinary decoder
    and gradients through the derivative encoding, with gradients at the
    inputs aligning with the supplied normals (unit-magnitude targets).
    """
    if cfg is None:
        cfg = EncodingConfig.for_kind("sdf")
    if len(op) < cfg.min_points:
        raise EmptyVoxelError(f"{len(op)} points < min_points={cfg.min_points}")
    design, targets = build_derivative_design(enc, op)
    return LatentFeature(solve_latent(design.T, targets[:, None], cfg.noise), kind="sdf")
