"""Zero level-set extraction and per-vertex normals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from ..engine import evaluate, query_gradient
from ..errors import ConfigError
from .mesh import TriMesh


@dataclass
class Extraction:
    mesh: TriMesh
    empty: bool
    resolution: int


def sample_lattice(field, resolution: int, chunk: int = 1 << 16) -> np.ndarray:
    """Field values on an ``M^3`` lattice spanning [-1, 1]^3, indexed ``[ix, iy, iz]``."""
    m = int(resolution)
    if m < 2:
        raise ConfigError("marching cubes needs resolution >= 2")
    axis = np.linspace(-1.0, 1.0, m)
    out = np.empty(m ** 3)
    # one x-slab at a time keeps the coordinate buffer small
    slab = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    per = max(1, chunk // (m * m))
    for x0 in range(0, m, per):
        xs = axis[x0:x0 + per]
        pts = np.concatenate([np.repeat(xs, m * m)[:, None], np.tile(slab, (len(xs), 1))], axis=1)
        out[x0 * m * m:(x0 + len(xs)) * m * m] = field(pts)
    return out.reshape(m, m, m)


def grid_field(grid, workers: int = 1):
    return lambda pts: evaluate(grid, pts, workers)


def marching_cubes(field, resolution: int = 64) -> Extraction:
    """Triangulate the zero set of ``field`` (callable on ``(N, 3)`` points) over [-1, 1]^3.

    Triangles are oriented with normals pointing toward increasing field
    values.  A field without a sign change yields an empty mesh and
    ``empty=True``.
    """
    vol = sample_lattice(field, resolution)
    if not (vol.min() < 0.0 < vol.max()):
        return Extraction(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), True,
                          resolution)
    h = 2.0 / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, 0.0, spacing=(h, h, h))
    mesh = TriMesh(verts.astype(np.float64) - 1.0, faces).cleaned()
    return Extraction(mesh, mesh.is_empty, resolution)


def estimate_normals(grid, vertices, workers: int = 1, eps: float = 1e-12):
    """Unit field gradients at ``vertices``; returns ``(normals, flagged)``.

    Vertices whose gradient norm is below ``eps`` are flagged and get a
    zero normal.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    g = query_gradient(grid, v, workers).grads
    norm = np.linalg.norm(g, axis=1)
    flagged = norm < eps
    normals = np.where(flagged[:, None], 0.0, g / np.where(flagged, 1.0, norm)[:, None])
    return normals, flagged
