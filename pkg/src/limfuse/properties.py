"""Surface property and feature fields: building, mesh coloring, queries.

The machinery is identical for any channel count; color (c=3), infrared
(c=1) and embedding vectors (c up to 768) differ only in the value matrix
handed to the encoder.  Semantic queries score decoded embedding vectors
against label vectors by cosine similarity.
"""

from __future__ import annotations

import struct

import numpy as np

from .encoder import EncodingConfig, LatentFeature, solve_latent
from .kernel import PositionalEncoder, encode_bulk_f32, posi_encode
from .surface import Frame, Mesh
from .voxelmap import LatentImplicitMap, overlapped_groups, query

FEATURE_IMAGE_DTYPES = {0: np.float32}


def build_property_lim(frame: Frame, channel_name: str, enc: PositionalEncoder,
                       voxel_size: float = 0.02,
                       encoding: EncodingConfig | None = None,
                       kind: str = "property") -> LatentImplicitMap:
    """Encode one frame's named channel into a local property/feature map.

    Same voxel policy as the surface pipeline: a voxel is allocated when it
    owns at least one point, and it is encoded from every point inside its
    doubled cube (weight = that count).
    """
    if channel_name not in frame.properties:
        raise KeyError(f"frame has no channel {channel_name!r}; "
                       f"available: {sorted(frame.properties)}")
    values = frame.properties[channel_name]
    channels = values.shape[1]
    if encoding is None:
        encoding = EncodingConfig.for_kind(kind)
    lim = LatentImplicitMap(voxel_size, kind, channels, enc)
    if len(frame) == 0:
        return lim

    keys, row_start, rows, normalized = overlapped_groups(frame.points, voxel_size)
    sizes = np.diff(row_start)
    selected = np.flatnonzero(sizes >= encoding.min_points)
    if selected.size == 0:
        return lim

    take = np.concatenate([np.arange(row_start[g], row_start[g + 1]) for g in selected])
    offsets = np.r_[0, np.cumsum(sizes[selected])]
    feats = encode_bulk_f32(enc, normalized[take]).astype(np.float64)
    vals = values[rows[take]]
    for i, g in enumerate(selected):
        s, e = offsets[i], offsets[i + 1]
        latent = solve_latent(feats[s:e], vals[s:e], encoding.noise)
        lim.add(keys[g], LatentFeature(latent, kind=kind), int(e - s))
    return lim


def colorize_mesh(lim: LatentImplicitMap, mesh: Mesh, name: str = "color") -> Mesh:
    """Decode the map at every mesh vertex into a per-vertex attribute.

    Vertices outside the map are flagged through the ``<name>_valid``
    attribute rather than encoded as a magic value.  Vertex count and
    topology are unchanged.
    """
    values, valid = query(lim, mesh.vertices)
    attrs = dict(mesh.attributes)
    attrs[name] = values
    attrs[f"{name}_valid"] = valid
    return Mesh(mesh.vertices.copy(), mesh.triangles.copy(), attrs)


def similarity_query(lim: LatentImplicitMap, points: np.ndarray, query_vec: np.ndarray):
    """Cosine similarity of the decoded field against a query vector.

    Returns (scores, valid): scores in [-1, 1] where valid, NaN elsewhere.
    Scale-invariant in the query vector by construction.
    """
    if lim.kind != "feature":
        raise ValueError(f"similarity queries need a feature map, got kind {lim.kind!r}")
    q = np.asarray(query_vec, dtype=np.float64).reshape(-1)
    if q.shape[0] != lim.channels:
        raise ValueError(f"query vector has {q.shape[0]} channels, map has {lim.channels}")
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ValueError("query vector must be non-zero")
    values, valid = query(lim, points)
    norms = np.linalg.norm(values, axis=1)
    denom = np.where(norms > 0, norms * qn, 1.0)
    scores = (values @ q) / denom
    scores[norms == 0] = 0.0
    scores[~valid] = np.nan
    return scores, valid


def classify_points(lim: LatentImplicitMap, points: np.ndarray, label_vecs: np.ndarray,
                    label_names=None, threshold: float | None = None):
    """Argmax-cosine label per point against a stack of label vectors.

    Ties break deterministically toward the lowest label index.  With a
    ``threshold``, points whose best score falls below it get label -1.
    Returns (labels, valid); invalid (unmapped) points are labeled -1.
    """
    vecs = np.atleast_2d(np.asarray(label_vecs, dtype=np.float64))
    k = vecs.shape[0]
    if k < 2:
        raise ValueError(f"need at least 2 label vectors, got {k}")
    if label_names is not None and len(label_names) != k:
        raise ValueError(f"{len(label_names)} names for {k} label vectors")
    if vecs.shape[1] != lim.channels:
        raise ValueError(f"label vectors have {vecs.shape[1]} channels, map has {lim.channels}")
    vnorm = np.linalg.norm(vecs, axis=1)
    if np.any(vnorm == 0):
        raise ValueError("label vectors must be non-zero")

    values, valid = query(lim, points)
    norms = np.linalg.norm(values, axis=1)
    denom = np.where(norms > 0, norms, 1.0)
    scores = (values @ vecs.T) / (denom[:, None] * vnorm[None, :])
    labels = np.argmax(scores, axis=1)
    if threshold is not None:
        labels = np.where(scores[np.arange(len(labels)), labels] >= threshold, labels, -1)
    labels = np.where(valid, labels, -1)
    return labels, valid


# ---------------------------------------------------------------------------
# external formats
# ---------------------------------------------------------------------------

def save_feature_image(path, image: np.ndarray) -> None:
    """Write an (H, W, C) float32 tensor: u32 header then row-major payload."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4I", w, h, c, 0))
        f.write(np.ascontiguousarray(img).tobytes())


def load_feature_image(path) -> np.ndarray:
    """Read a feature image written by save_feature_image."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated feature image header")
    w, h, c, dtype_tag = struct.unpack_from("<4I", raw)
    if dtype_tag not in FEATURE_IMAGE_DTYPES:
        raise ValueError(f"{path}: unknown dtype tag {dtype_tag}")
    dtype = FEATURE_IMAGE_DTYPES[dtype_tag]
    expect = 16 + h * w * c * np.dtype(dtype).itemsize
    if len(raw) != expect:
        raise ValueError(f"{path}: size {len(raw)} != expected {expect}")
    return np.frombuffer(raw, dtype=dtype, offset=16).reshape(h, w, c).copy()


def save_label_vectors(path, names, vectors: np.ndarray) -> None:
    """One record per line: the label name followed by its c floats."""
    vecs = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if len(names) != vecs.shape[0]:
        raise ValueError(f"{len(names)} names for {vecs.shape[0]} vectors")
    with open(path, "w") as f:
        for name, vec in zip(names, vecs):
            f.write(name + " " + " ".join(f"{v:.9g}" for v in vec) + "\n")


def load_label_vectors(path):
    """Read label vectors; returns (names, (K, c) array)."""
    names, rows = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad float in label record") from exc
            names.append(parts[0])
    if not names:
        raise ValueError(f"{path}: no label records")
    vecs = np.array(rows, dtype=np.float64)
    if vecs.ndim != 2 or np.any([len(r) != vecs.shape[1] for r in rows]):
        raise ValueError(f"{path}: inconsistent vector lengths")
    return names, vecs
