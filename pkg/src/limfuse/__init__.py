"""Training-free continuous mapping with latent implicit maps.

Point clouds and their per-point properties (signed distance geometry,
color, infrared, high-dimensional embeddings) are encoded voxel-by-voxel
into fixed-size latents through decoupled Gaussian process regression on a
low-rank Matern-7/2 feature map.  Local maps fuse incrementally into a
global sparse map, from which meshes, property fields, renders and
semantic similarity maps are extracted.
"""

from .encoder import (EncodingConfig, EmptyVoxelError, LatentFeature, decode,
                      decode_batch, encode)
from .gpis import (GpisConfig, OrientedPoints, encode_surface_derivative,
                   encode_surface_sample, estimate_normals, extend_samples)
from .ingest import (ParseError, SyntheticScene, analytic_render,
                     exact_gpr_oracle, load_ply, load_poses,
                     make_synthetic_scene, save_ply, unproject)
from .kernel import (EigenFloorError, KernelParams, PositionalEncoder,
                     build_anchor_basis, load_basis, matern_72,
                     matern_72_ddist, posi_encode, posi_encode_deriv,
                     save_basis)
from .properties import (build_property_lim, classify_points, colorize_mesh,
                         load_feature_image, load_label_vectors,
                         save_feature_image, save_label_vectors,
                         similarity_query)
from .surface import (Camera, Frame, Mesh, SdfGrid, build_local_surface_lim,
                      extract_sdf_grid, marching_cubes, raycast_render,
                      sample_mesh_surface)
from .voxelmap import (LatentImplicitMap, Voxel, assign_points_overlapped,
                       fuse_voxel, integrate, load_map, query, save_map,
                       voxel_center, voxel_index)

__version__ = "0.1.0"

__all__ = [
    "Camera", "EigenFloorError", "EmptyVoxelError", "EncodingConfig",
    "Frame", "GpisConfig", "KernelParams", "LatentFeature",
    "LatentImplicitMap", "Mesh", "OrientedPoints", "ParseError",
    "PositionalEncoder", "SdfGrid", "SyntheticScene", "Voxel",
    "analytic_render", "assign_points_overlapped", "build_anchor_basis",
    "build_local_surface_lim", "build_property_lim", "classify_points",
    "colorize_mesh", "decode", "decode_batch", "encode",
    "encode_surface_derivative", "encode_surface_sample", "estimate_normals",
    "exact_gpr_oracle", "extend_samples", "extract_sdf_grid", "fuse_voxel",
    "integrate", "load_basis", "load_feature_image", "load_label_vectors",
    "load_map", "load_ply", "load_poses", "make_synthetic_scene",
    "marching_cubes", "matern_72", "matern_72_ddist", "posi_encode",
    "posi_encode_deriv", "query", "raycast_render", "sample_mesh_surface",
    "save_basis", "save_feature_image", "save_label_vectors", "save_map",
    "save_ply", "similarity_query", "unproject", "voxel_center", "voxel_index",
]
