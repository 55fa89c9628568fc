"""Shape oracles, meshes, extraction and metrics."""

from .extract import Extraction, estimate_normals, grid_field, marching_cubes
from .mesh import TriMesh, icosphere, load_obj, mesh_signed_distance, sample_mesh_surface, save_obj
from .metrics import VolumeMetrics, chamfer, iou, surface_chamfer, volume_metrics
from .oracles import Box, BumpySphere, MeshOracle, SdfOracle, Sphere, Torus, parse_shape

__all__ = [
    "Box", "BumpySphere", "Extraction", "MeshOracle", "SdfOracle", "Sphere", "Torus", "TriMesh",
    "VolumeMetrics", "chamfer", "estimate_normals", "grid_field", "icosphere", "iou",
    "load_obj", "marching_cubes", "mesh_signed_distance", "parse_shape", "sample_mesh_surface",
    "save_obj", "surface_chamfer", "volume_metrics",
]
