"""Chamfer distance and sampled volume metrics.

Units follow the usual reporting convention: Chamfer x1e3, AE x1e4,
IOU in percent.  Metrics are computed in the normalized [-1, 1]^3 domain.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..engine import evaluate
from ..errors import ConfigError
from .mesh import TriMesh, sample_mesh_surface

CD_UNIT = 1e3
AE_UNIT = 1e4


def chamfer(points_a, points_b) -> float:
    """Mean nearest-neighbour distance from A to B plus from B to A."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("chamfer distance needs two non-empty point sets")
    dab = cKDTree(b).query(a)[0]
    dba = cKDTree(a).query(b)[0]
    return float(dab.mean() + dba.mean())


def surface_chamfer(mesh: TriMesh, oracle, n: int = 100_000, rng=None) -> float:
    """Chamfer between area-weighted samples of ``mesh`` and of the oracle surface.

    An empty mesh gives ``inf``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if mesh.is_empty:
        return float("inf")
    a = sample_mesh_surface(mesh, n, rng)[0]
    b = oracle.sample_surface(n, rng)
    return chamfer(a, b)


def iou(pred, target) -> float:
    """Intersection over union of the negative (inside) regions, in percent."""
    p = np.asarray(pred) < 0.0
    t = np.asarray(target) < 0.0
    union = np.count_nonzero(p | t)
    if union == 0:
        return 100.0
    return 100.0 * np.count_nonzero(p & t) / union


@dataclass
class VolumeMetrics:
    vol_ae: float
    vol_iou: float
    near_ae: float
    near_iou: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def metric_points(oracle, n_volume: int, n_near: int, sigma: float, rng):
    vol = rng.uniform(-1.0, 1.0, (n_volume, 3))
    near = oracle.sample_surface(n_near, rng) + sigma * rng.standard_normal((n_near, 3))
    return vol, near


def volume_metrics(predict, oracle, n_volume: int = 100_000, n_near: int = 100_000,
                   sigma: float = 0.01, rng=None, workers: int = 1) -> VolumeMetrics:
    """AE (x1e4) and IOU (%) over uniform volume points and near-surface points.

    ``predict`` is a grid-like object accepted by the engine or a callable
    on ``(N, 3)`` points.
    """
    rng = np.random.default_rng(12345) if rng is None else rng
    f = predict if callable(predict) else (lambda p: evaluate(predict, p, workers))
    vol, near = metric_points(oracle, n_volume, n_near, sigma, rng)
    out = []
    for pts in (vol, near):
        pred = f(pts)
        tgt = oracle.distance(pts)
        out += [float(np.mean(np.abs(pred - tgt)) * AE_UNIT), iou(pred, tgt)]
    return VolumeMetrics(*out)
