"""Ground-truth signed distance oracles (negative inside)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .mesh import TriMesh, load_obj, mesh_signed_distance, normalize_to_domain, sample_mesh_surface


class SdfOracle:
    """Interface: ``distance(points) -> (N,)`` and ``sample_surface(n, rng) -> (n, 3)``."""

    name = "oracle"

    def distance(self, points) -> np.ndarray:
        raise NotImplementedError

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, points) -> np.ndarray:
        return self.distance(points)


def _pts(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p.reshape(-1, 3)


def _unit_vectors(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True)
class Sphere(SdfOracle):
    radius: float = 0.5
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError("sphere radius must be positive")

    def distance(self, points):
        return np.linalg.norm(_pts(points) - np.asarray(self.center), axis=1) - self.radius

    def sample_surface(self, n, rng):
        return np.asarray(self.center) + self.radius * _unit_vectors(n, rng)


@dataclass(frozen=True)
class Box(SdfOracle):
    half: tuple[float, float, float] = (0.4, 0.4, 0.4)
    name = "box"

    def __post_init__(self):
        if min(self.half) <= 0:
            raise ConfigError("box half-extents must be positive")

    def distance(self, points):
        q = np.abs(_pts(points)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def sample_surface(self, n, rng):
        h = np.asarray(self.half)
        # face pairs normal to x, y, z with areas 4*hy*hz etc.
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, (n, 3)) * h
        side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        pts[np.arange(n), axis] = side * h[axis]
        return pts


@dataclass(frozen=True)
class Torus(SdfOracle):
    """Ring of radius ``major`` in the xy-plane, tube radius ``minor``."""

    major: float = 0.5
    minor: float = 0.2
    name = "torus"

    def __post_init__(self):
        if not 0 < self.minor < self.major:
            raise ConfigError("torus needs 0 < minor < major")

    def distance(self, points):
        p = _pts(points)
        ring = np.hypot(p[:, 0], p[:, 1]) - self.major
        return np.hypot(ring, p[:, 2]) - self.minor

    def sample_surface(self, n, rng):
        # tube angle density is proportional to the local ring radius (rejection sampling)
        big, small = self.major, self.minor
        v = np.empty(0)
        while len(v) < n:
            cand = rng.uniform(0.0, 2 * np.pi, 2 * n)
            keep = rng.random(2 * n) * (big + small) < big + small * np.cos(cand)
            v = np.concatenate([v, cand[keep]])
        v = v[:n]
        u = rng.uniform(0.0, 2 * np.pi, n)
        rr = big + small * np.cos(v)
        return np.stack([rr * np.cos(u), rr * np.sin(u), small * np.sin(v)], axis=1)


@dataclass(frozen=True)
class BumpySphere(SdfOracle):
    """Sphere with a separable cosine bump pattern; a level-set function, not an exact SDF."""

    radius: float = 0.5
    amplitude: float = 0.03
    frequency: float = 4.0
    name = "bumpy"

    def _bump(self, p):
        return self.amplitude * np.prod(np.cos(self.frequency * np.pi * p), axis=1)

    def distance(self, points):
        p = _pts(points)
        return np.linalg.norm(p, axis=1) - self.radius - self._bump(p)

    def sample_surface(self, n, rng):
        # project unit directions onto the zero set by a few fixed-point steps along the ray
        d = _unit_vectors(n, rng)
        r = np.full(n, self.radius)
        for _ in range(20):
            r = self.radius + self._bump(d * r[:, None])
        return d * r[:, None]


@dataclass(eq=False)
class MeshOracle(SdfOracle):
    mesh: TriMesh
    name = "mesh"

    def __post_init__(self):
        if self.mesh.is_empty:
            raise ConfigError("mesh has no triangles")

    def distance(self, points):
        return mesh_signed_distance(self.mesh, _pts(points))

    def sample_surface(self, n, rng):
        return sample_mesh_surface(self.mesh, n, rng)[0]


def _kv(body: str) -> dict[str, float]:
    out = {}
    for part in filter(None, body.split(",")):
        if "=" not in part:
            raise ConfigError(f"bad shape parameter {part!r}; expected key=value")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise ConfigError(f"bad shape parameter {part!r}") from exc
    return out


def parse_shape(spec: str, normalize: bool = True) -> SdfOracle:
    """``sphere:r=0.5``, ``box:hx=..,hy=..,hz=..`` (or ``h=``), ``torus:R=..,r=..``,
    ``bumpy:r=..,a=..,k=..`` or a path to an OBJ file.

    OBJ meshes are rescaled into [-0.95, 0.95]^3 unless ``normalize`` is off.
    """
    kind, _, body = spec.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "sphere":
            kv = _kv(body)
            c = (kv.pop("cx", 0.0), kv.pop("cy", 0.0), kv.pop("cz", 0.0))
            r = kv.pop("r", 0.5)
            _no_extra(kv, spec)
            return Sphere(r, c)
        if kind == "box":
            kv = _kv(body)
            h = kv.pop("h", 0.4)
            half = (kv.pop("hx", h), kv.pop("hy", h), kv.pop("hz", h))
            _no_extra(kv, spec)
            return Box(half)
        if kind == "torus":
            kv = _kv(body)
            t = Torus(kv.pop("R", 0.5), kv.pop("r", 0.2))
            _no_extra(kv, spec)
            return t
        if kind == "bumpy":
            kv = _kv(body)
            b = BumpySphere(kv.pop("r", 0.5), kv.pop("a", 0.03), kv.pop("k", 4.0))
            _no_extra(kv, spec)
            return b
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"shape {spec!r} is neither an analytic spec nor a readable file")
    mesh = load_obj(path)
    return MeshOracle(normalize_to_domain(mesh) if normalize else mesh)


def _no_extra(kv: dict, spec: str) -> None:
    if kv:
        raise ConfigError(f"unknown parameters {sorted(kv)} in shape {spec!r}")
