"""Decoupled regression: collapse (points, values) into a fixed-size latent.

Encoding solves a ridge problem in feature space.  The textbook form
predicts with the N x N kernel matrix; pushing the inverse through the
feature map gives the identical result from an l x l solve:

    F = Phi (Phi^T Phi + noise^2 I)^-1 Y  =  (Phi Phi^T + noise^2 I)^-1 Phi Y

with Phi the l x N matrix of encoded points.  Decoding a query point is
then just an inner product with F.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .kernel import PositionalEncoder, posi_encode

KINDS = ("sdf", "property", "feature")

# Below these counts a latent is noise-dominated; pipelines skip such voxels.
MIN_POINTS_DEFAULT = {"sdf": 8, "property": 4, "feature": 4}


class EmptyVoxelError(ValueError):
    """Raised when a voxel holds fewer observations than required."""


@dataclass
class LatentFeature:
    """An l x c latent matrix encoding one voxel's local field."""

    matrix: np.ndarray
    kind: str = "property"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"latent matrix must be 2-D, got shape {self.matrix.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "sdf" and self.matrix.shape[1] != 1:
            raise ValueError("sdf latents carry a single channel")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("latent matrix contains non-finite entries")

    @property
    def rank(self) -> int:
        return self.matrix.shape[0]

    @property
    def channels(self) -> int:
        return self.matrix.shape[1]


@dataclass
class EncodingConfig:
    noise: float = 0.05
    min_points: int = 4

    def __post_init__(self):
        if not self.noise > 0:
            raise ValueError(f"noise must be positive, got {self.noise}")
        if self.min_points < 1:
            raise ValueError(f"min_points must be >= 1, got {self.min_points}")

    @classmethod
    def for_kind(cls, kind: str, noise: float = 0.05) -> "EncodingConfig":
        return cls(noise=noise, min_points=MIN_POINTS_DEFAULT[kind])


def solve_latent(feats: np.ndarray, values: np.ndarray, noise: float) -> np.ndarray:
    """Ridge solve in feature space: (Phi Phi^T + noise^2 I)^-1 Phi Y.

    ``feats`` is (N, l) = Phi^T.  The regularized Gram matrix is symmetric
    positive definite by construction, so a Cholesky factorization always
    applies; there is deliberately no pseudo-inverse fallback.
    """
    rank = feats.shape[1]
    gram = feats.T @ feats
    gram[np.diag_indices(rank)] += noise * noise
    rhs = feats.T @ values
    return cho_solve(cho_factor(gram, lower=True), rhs)


def encode(enc: PositionalEncoder, points: np.ndarray, values: np.ndarray,
           cfg: EncodingConfig | None = None, kind: str = "property") -> LatentFeature:
    """Encode observations inside one voxel into an l x c latent.

    ``points`` are normalized voxel coordinates, ``values`` is (N,) or
    (N, c).  The latent is linear in the values, and channels are solved
    jointly but independently (same system matrix, c right-hand sides).
    """
    if cfg is None:
        cfg = EncodingConfig.for_kind(kind)
    pts = np.asarray(points, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[:, None]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    if vals.shape[0] != pts.shape[0]:
        raise ValueError(f"{pts.shape[0]} points but {vals.shape[0]} value rows")
    if pts.shape[0] < cfg.min_points:
        raise EmptyVoxelError(f"{pts.shape[0]} points < min_points={cfg.min_points}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite point coordinates")
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite values")
    feats = posi_encode(enc, pts)
    return LatentFeature(solve_latent(feats, vals, cfg.noise), kind=kind)


def decode(enc: PositionalEncoder, feature: LatentFeature, x: np.ndarray) -> np.ndarray:
    """Evaluate a latent at a query point: f(x)^T F, a c-vector."""
    if feature.rank != enc.rank:
        raise ValueError(f"latent rank {feature.rank} != encoder rank {enc.rank}")
    return posi_encode(enc, np.asarray(x, dtype=np.float64)) @ feature.matrix


def decode_batch(enc: PositionalEncoder, feature: LatentFeature, points: np.ndarray) -> np.ndarray:
    """Row-wise decode of an (M, 3) batch with a single encoding pass."""
    if feature.rank != enc.rank:
        raise ValueError(f"latent rank {feature.rank} != encoder rank {enc.rank}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return posi_encode(enc, pts) @ feature.matrix
