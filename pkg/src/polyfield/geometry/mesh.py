"""Triangle meshes: OBJ I/O, area-weighted sampling and signed distance.

Unsigned distance is exact (BVH with box pruning).  The sign comes from the
generalized winding number, evaluated exactly for nearby triangle clusters
and with a dipole expansion for far clusters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from ..errors import ConfigError


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    _bvh: "Bvh | None" = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ConfigError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)

    def vertex_normals(self) -> np.ndarray:
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])  # area-weighted
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], n)
        ln = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.where(ln > 0, ln, 1.0)

    def signed_volume(self) -> float:
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def cleaned(self, eps: float = 0.0) -> "TriMesh":
        """Drop zero-area triangles and unreferenced vertices."""
        keep = self.face_areas() > eps
        faces = self.faces[keep]
        used, inverse = np.unique(faces.ravel(), return_inverse=True)
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3))

    def flipped(self) -> "TriMesh":
        return TriMesh(self.vertices, self.faces[:, ::-1])

    def bvh(self) -> "Bvh":
        if self._bvh is None:
            if self.is_empty:
                raise ConfigError("mesh has no triangles")
            self._bvh = Bvh.build(self.triangles())
        return self._bvh


# -- OBJ --------------------------------------------------------------------------


def load_obj(path) -> TriMesh:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    text = Path(path).read_text()
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise ConfigError(f"{path}: no vertices")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3)).cleaned()


def save_obj(mesh: TriMesh, path, normals: np.ndarray | None = None) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.faces + 1]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def normalize_to_domain(mesh: TriMesh, margin: float = 0.05) -> TriMesh:
    """Center the bounding box and scale the longest half-extent to ``1 - margin``."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float((hi - lo).max())
    if half <= 0:
        raise ConfigError("mesh has zero extent")
    return TriMesh((mesh.vertices - center) * ((1.0 - margin) / half), mesh.faces)


def icosphere(subdivisions: int = 0, radius: float = 1.0) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t),
         (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return TriMesh(np.array(verts) * radius, np.array(faces))


def sample_mesh_surface(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-weighted uniform samples; returns ``(points, face_ids)``."""
    if mesh.is_empty:
        raise ConfigError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    fid = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    t = mesh.triangles()[fid]
    pts = t[:, 0] + u[:, :1] * (t[:, 1] - t[:, 0]) + u[:, 1:] * (t[:, 2] - t[:, 0])
    return pts, fid


# -- BVH ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Bvh:
    tris: np.ndarray  # (T, 3, 3) in leaf order
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    bmin: np.ndarray
    bmax: np.ndarray
    center: np.ndarray
    radius: np.ndarray
    dipole: np.ndarray

    @classmethod
    def build(cls, tris: np.ndarray, leaf_size: int = 8) -> "Bvh":
        tris = np.asarray(tris, dtype=np.float64)
        cent = tris.mean(axis=1)
        order = np.arange(len(tris))
        nodes = []  # (start, end, left, right)
        stack = [(0, len(tris), -1, 0)]  # start, end, parent, side
        while stack:
            s, e, parent, side = stack.pop()
            nid = len(nodes)
            nodes.append([s, e, -1, -1])
            if parent >= 0:
                nodes[parent][2 + side] = nid
            if e - s <= leaf_size:
                continue
            seg = order[s:e]
            c = cent[seg]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = (e - s) // 2
            part = np.argpartition(c[:, axis], mid)
            order[s:e] = seg[part]
            stack.append((s + mid, e, nid, 1))
            stack.append((s, s + mid, nid, 0))
        nodes = np.array(nodes, dtype=np.int64)
        t = tris[order]
        n = len(nodes)
        bmin = np.empty((n, 3))
        bmax = np.empty((n, 3))
        center = np.empty((n, 3))
        radius = np.empty(n)
        dipole = np.empty((n, 3))
        area_n = 0.5 * np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        area = np.linalg.norm(area_n, axis=1)
        tc = t.mean(axis=1)
        for k, (s, e, _, _) in enumerate(nodes):
            pts = t[s:e].reshape(-1, 3)
            bmin[k] = pts.min(axis=0)
            bmax[k] = pts.max(axis=0)
            w = area[s:e]
            center[k] = (tc[s:e] * w[:, None]).sum(0) / w.sum() if w.sum() > 0 else tc[s:e].mean(0)
            radius[k] = np.sqrt(((pts - center[k]) ** 2).sum(1).max())
            dipole[k] = area_n[s:e].sum(axis=0)
        return cls(np.ascontiguousarray(t), nodes[:, 2].copy(), nodes[:, 3].copy(),
                   nodes[:, 0].copy(), nodes[:, 1].copy(), bmin, bmax, center, radius, dipole)


@njit(cache=True, inline="always")
def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@njit(cache=True)
def _point_tri_d2(px, py, pz, tri):
    # closest point on a triangle by Voronoi region (Ericson 5.1.5)
    ax, ay, az = tri[0, 0], tri[0, 1], tri[0, 2]
    bx, by, bz = tri[1, 0], tri[1, 1], tri[1, 2]
    cx, cy, cz = tri[2, 0], tri[2, 1], tri[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = _dot(abx, aby, abz, apx, apy, apz)
    d2 = _dot(acx, acy, acz, apx, apy, apz)
    if d1 <= 0.0 and d2 <= 0.0:
        return _dot(apx, apy, apz, apx, apy, apz)
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        return _dot(bpx, bpy, bpz, bpx, bpy, bpz)
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        rx, ry, rz = apx - v * abx, apy - v * aby, apz - v * abz
        return _dot(rx, ry, rz, rx, ry, rz)
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        return _dot(cpx, cpy, cpz, cpx, cpy, cpz)
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        rx, ry, rz = apx - w * acx, apy - w * acy, apz - w * acz
        return _dot(rx, ry, rz, rx, ry, rz)
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        rx, ry, rz = bpx - w * (cx - bx), bpy - w * (cy - by), bpz - w * (cz - bz)
        return _dot(rx, ry, rz, rx, ry, rz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    rx = apx - abx * v - acx * w
    ry = apy - aby * v - acy * w
    rz = apz - abz * v - acz * w
    return _dot(rx, ry, rz, rx, ry, rz)


@njit(cache=True)
def _box_d2(px, py, pz, lo, hi):
    s = 0.0
    for d, v in ((0, px), (1, py), (2, pz)):
        if v < lo[d]:
            s += (lo[d] - v) ** 2
        elif v > hi[d]:
            s += (v - hi[d]) ** 2
    return s


@njit(cache=True)
def _solid_angle(px, py, pz, tri):
    ax, ay, az = tri[0, 0] - px, tri[0, 1] - py, tri[0, 2] - pz
    bx, by, bz = tri[1, 0] - px, tri[1, 1] - py, tri[1, 2] - pz
    cx, cy, cz = tri[2, 0] - px, tri[2, 1] - py, tri[2, 2] - pz
    la = math.sqrt(_dot(ax, ay, az, ax, ay, az))
    lb = math.sqrt(_dot(bx, by, bz, bx, by, bz))
    lc = math.sqrt(_dot(cx, cy, cz, cx, cy, cz))
    det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
    den = la * lb * lc + _dot(ax, ay, az, bx, by, bz) * lc + _dot(bx, by, bz, cx, cy, cz) * la \
        + _dot(cx, cy, cz, ax, ay, az) * lb
    return 2.0 * math.atan2(det, den)


@njit(cache=True)
def _distance_and_winding(points, tris, left, right, start, end, bmin, bmax, center, radius,
                          dipole, far_ratio, out_d, out_w):
    stack = np.empty(128, dtype=np.int64)
    for j in range(points.shape[0]):
        px, py, pz = points[j, 0], points[j, 1], points[j, 2]
        # unsigned distance, nearer child first
        best = np.inf
        top = 1
        stack[0] = 0
        while top > 0:
            top -= 1
            nd = stack[top]
            if _box_d2(px, py, pz, bmin[nd], bmax[nd]) >= best:
                continue
            if left[nd] < 0:
                for t in range(start[nd], end[nd]):
                    d2 = _point_tri_d2(px, py, pz, tris[t])
                    if d2 < best:
                        best = d2
            else:
                l = left[nd]
                r = right[nd]
                if _box_d2(px, py, pz, bmin[l], bmax[l]) < _box_d2(px, py, pz, bmin[r], bmax[r]):
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2
        out_d[j] = math.sqrt(best)
        # winding number: dipole term for far clusters
        w = 0.0
        top = 1
        stack[0] = 0
        while top > 0:
            top -= 1
            nd = stack[top]
            rx = center[nd, 0] - px
            ry = center[nd, 1] - py
            rz = center[nd, 2] - pz
            dist = math.sqrt(rx * rx + ry * ry + rz * rz)
            if dist > far_ratio * radius[nd]:
                w += (rx * dipole[nd, 0] + ry * dipole[nd, 1] + rz * dipole[nd, 2]) / (dist * dist * dist)
                continue
            if left[nd] < 0:
                for t in range(start[nd], end[nd]):
                    w += _solid_angle(px, py, pz, tris[t])
            else:
                stack[top] = left[nd]
                stack[top + 1] = right[nd]
                top += 2
        out_w[j] = w / (4.0 * math.pi)


def distance_and_winding(mesh: TriMesh, points, far_ratio: float = 3.0):
    """Exact unsigned distance and (approximate far-field) winding number per point."""
    bvh = mesh.bvh()
    p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.empty(len(p))
    w = np.empty(len(p))
    _distance_and_winding(p, bvh.tris, bvh.left, bvh.right, bvh.start, bvh.end, bvh.bmin,
                          bvh.bmax, bvh.center, bvh.radius, bvh.dipole, float(far_ratio), d, w)
    return d, w


def winding_number_exact(mesh: TriMesh, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    t = mesh.triangles()
    out = np.empty(len(p))
    for j, q in enumerate(p):
        a, b, c = t[:, 0] - q, t[:, 1] - q, t[:, 2] - q
        la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
        det = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = la * lb * lc + np.einsum("ij,ij->i", a, b) * lc + np.einsum("ij,ij->i", b, c) * la \
            + np.einsum("ij,ij->i", c, a) * lb
        out[j] = (2.0 * np.arctan2(det, den)).sum() / (4.0 * np.pi)
    return out


def mesh_signed_distance(mesh: TriMesh, points) -> np.ndarray:
    """Distance to the nearest triangle, negative where the winding number exceeds 0.5."""
    if mesh.is_empty:
        raise ConfigError("mesh has no triangles")
    d, w = distance_and_winding(mesh, points)
    return np.where(w > 0.5, -d, d)
