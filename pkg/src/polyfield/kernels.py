"""Numba kernels for the streaming forward / query-gradient / backward passes.

Keys are bucketed into a uniform grid of cells (:class:`KeyIndex`) and
queries are sorted into their own, finer grid of cells (:class:`QueryTiling`).
For each query cell one candidate list of keys is gathered; every query in
the cell then makes a max-reduce sweep over the candidates to find its
largest exponent ``m`` and a second sweep that accumulates the max-shifted
terms, so the saved denominator is always >= 1.  Per-query state is a
handful of scalars; nothing of size ``keys x queries`` is ever stored.

A term is skipped when its shifted exponent is below ``cutoff`` (default
``-(40 + ln K)``): its normalized weight is then < ``e**-40 / K``, so all
skipped terms together change the denominator by less than ``5e-18``.
Candidate gathering applies the same test to a lower bound of ``m`` over
the query cell and an upper bound of each exponent over the cell, so it
never drops a term that the per-query test would keep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

# prefer OpenMP; older TBB builds only produce a warning on first parallel call
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

CUTOFF_MARGIN = 40.0


def default_cutoff(num_keys: int) -> float:
    return -(CUTOFF_MARGIN + math.log(max(num_keys, 1)))


@dataclass(frozen=True)
class KeyIndex:
    kx: np.ndarray
    ky: np.ndarray
    kz: np.ndarray
    beta: np.ndarray
    coeffs: np.ndarray
    ex: np.ndarray
    scl: np.ndarray
    perm: np.ndarray  # sorted position -> original key index
    lo: np.ndarray
    h: np.ndarray
    dims: np.ndarray
    start: np.ndarray
    bmin: np.ndarray
    bmax: np.ndarray
    cbeta: np.ndarray
    beta_min: float
    cutoff: float
    full: bool = False

    def arrays(self):
        return (self.kx, self.ky, self.kz, self.beta, self.coeffs, self.ex, self.scl,
                self.lo, self.h, self.dims, self.start, self.bmin, self.bmax, self.cbeta,
                self.beta_min, self.cutoff, self.full)

    def __len__(self) -> int:
        return len(self.kx)

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.arrays() if isinstance(a, np.ndarray))


def build_index(keys, beta, coeffs, ex, scl, cull: bool = True, cutoff: float | None = None,
                keys_per_cell: float = 8.0) -> KeyIndex:
    """Sort keys into cells.  ``cull=False`` makes every kernel visit every key."""
    keys = np.asarray(keys, dtype=np.float64)
    n = len(keys)
    if cutoff is None:
        cutoff = default_cutoff(n)
    g = max(1, int(round((n / keys_per_cell) ** (1.0 / 3.0)))) if cull else 1
    lo = keys.min(axis=0)
    hi = keys.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    dims = np.full(3, g, dtype=np.int64)
    h = span / g
    cell3 = np.clip(((keys - lo) / h).astype(np.int64), 0, g - 1)
    cid = (cell3[:, 0] * g + cell3[:, 1]) * g + cell3[:, 2]
    perm = np.argsort(cid, kind="stable")
    ncell = g**3
    counts = np.bincount(cid, minlength=ncell)
    start = np.zeros(ncell + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    ks = keys[perm]
    bs = np.asarray(beta, dtype=np.float64)[perm]
    cs = cid[perm]
    bmin = np.full((ncell, 3), np.inf)
    bmax = np.full((ncell, 3), -np.inf)
    cbeta = np.full(ncell, np.inf)
    for d in range(3):
        np.minimum.at(bmin[:, d], cs, ks[:, d])
        np.maximum.at(bmax[:, d], cs, ks[:, d])
    np.minimum.at(cbeta, cs, bs)
    return KeyIndex(
        np.ascontiguousarray(ks[:, 0]), np.ascontiguousarray(ks[:, 1]),
        np.ascontiguousarray(ks[:, 2]), np.ascontiguousarray(bs),
        np.ascontiguousarray(np.asarray(coeffs, dtype=np.float64)[perm]),
        np.ascontiguousarray(ex), np.ascontiguousarray(scl, dtype=np.float64), perm,
        lo, h, dims, start, bmin, bmax, cbeta, float(bs.min()), float(cutoff), not cull,
    )


@dataclass(frozen=True)
class QueryTiling:
    """Queries sorted by cell: ``order[s]`` is the query at sorted position ``s``."""

    order: np.ndarray
    qcid: np.ndarray
    qlo: np.ndarray
    qh: np.ndarray
    qdims: np.ndarray

    def arrays(self):
        return self.order, self.qcid, self.qlo, self.qh, self.qdims


def build_tiling(q: np.ndarray, cull: bool = True, queries_per_cell: float = 16.0,
                 max_dims: int = 64) -> QueryTiling:
    n = len(q)
    g = max(1, min(max_dims, int(round((n / queries_per_cell) ** (1.0 / 3.0))))) if cull else 1
    qlo = q.min(axis=0)
    span = np.maximum(q.max(axis=0) - qlo, 1e-12)
    qh = span / g
    cell3 = np.clip(((q - qlo) / qh).astype(np.int64), 0, g - 1)
    cid = (cell3[:, 0] * g + cell3[:, 1]) * g + cell3[:, 2]
    order = np.argsort(cid, kind="stable")
    return QueryTiling(order, np.ascontiguousarray(cid[order]), qlo, qh,
                       np.full(3, g, dtype=np.int64))


# -- polynomial helpers ---------------------------------------------------------


@njit(inline="always")
def _pw(x, x2, x3, e):
    if e == 0:
        return 1.0
    if e == 1:
        return x
    if e == 2:
        return x2
    return x3


@njit(inline="always")
def _dpw(x, x2, e):
    if e == 0:
        return 0.0
    if e == 1:
        return 1.0
    if e == 2:
        return 2.0 * x
    return 3.0 * x2


@njit(inline="always")
def _poly(coeffs, i, ex, scl, x, y, z):
    x2 = x * x
    y2 = y * y
    z2 = z * z
    x3 = x2 * x
    y3 = y2 * y
    z3 = z2 * z
    acc = 0.0
    for p in range(coeffs.shape[1]):
        acc += coeffs[i, p] * (scl[p] * _pw(x, x2, x3, ex[p, 0]) * _pw(y, y2, y3, ex[p, 1])
                               * _pw(z, z2, z3, ex[p, 2]))
    return acc


# -- candidate gathering -----------------------------------------------------------


@njit(inline="always")
def _clip_cell(v, lo, h, g):
    c = math.floor((v - lo) / h)
    if c < 0:
        return 0
    if c > g - 1:
        return g - 1
    return int(c)


@njit(inline="always")
def _gap(a0, a1, b0, b1):
    # distance between intervals [a0, a1] and [b0, b1]
    if b0 > a1:
        return b0 - a1
    if a0 > b1:
        return a0 - b1
    return 0.0


@njit(inline="always")
def _far(v, a0, a1):
    return max(abs(v - a0), abs(v - a1))


@njit(cache=True)
def _gather(cell, qlo, qh, qdims, kx, ky, kz, beta, lo, h, dims, start, bmin, bmax, cbeta,
            beta_min, cutoff, full, cand):
    """Write into ``cand`` every key that can pass the cutoff for some query in ``cell``."""
    n_keys = kx.shape[0]
    if full:
        for i in range(n_keys):
            cand[i] = i
        return n_keys
    qgy = qdims[1]
    qgz = qdims[2]
    icz = cell % qgz
    icy = (cell // qgz) % qgy
    icx = cell // (qgy * qgz)
    x0 = qlo[0] + icx * qh[0]
    y0 = qlo[1] + icy * qh[1]
    z0 = qlo[2] + icz * qh[2]
    x1 = x0 + qh[0]
    y1 = y0 + qh[1]
    z1 = z0 + qh[2]
    gx = dims[0]
    gy = dims[1]
    gz = dims[2]
    # lower bound on the max exponent of any query in the cell, from nearby keys
    hx = _clip_cell(0.5 * (x0 + x1), lo[0], h[0], gx)
    hy = _clip_cell(0.5 * (y0 + y1), lo[1], h[1], gy)
    hz = _clip_cell(0.5 * (z0 + z1), lo[2], h[2], gz)
    m = -np.inf
    for cx in range(max(hx - 1, 0), min(hx + 2, gx)):
        for cy in range(max(hy - 1, 0), min(hy + 2, gy)):
            for cz in range(max(hz - 1, 0), min(hz + 2, gz)):
                c = (cx * gy + cy) * gz + cz
                for i in range(start[c], start[c + 1]):
                    fx = _far(kx[i], x0, x1)
                    fy = _far(ky[i], y0, y1)
                    fz = _far(kz[i], z0, z1)
                    a = -beta[i] * (fx * fx + fy * fy + fz * fz)
                    if a > m:
                        m = a
    if m == -np.inf:
        cx0, cx1, cy0, cy1, cz0, cz1 = 0, gx - 1, 0, gy - 1, 0, gz - 1
        thr = -np.inf
    else:
        thr = m + cutoff
        r = math.sqrt(-thr / beta_min)
        cx0 = _clip_cell(x0 - r, lo[0], h[0], gx)
        cx1 = _clip_cell(x1 + r, lo[0], h[0], gx)
        cy0 = _clip_cell(y0 - r, lo[1], h[1], gy)
        cy1 = _clip_cell(y1 + r, lo[1], h[1], gy)
        cz0 = _clip_cell(z0 - r, lo[2], h[2], gz)
        cz1 = _clip_cell(z1 + r, lo[2], h[2], gz)
    n = 0
    for cx in range(cx0, cx1 + 1):
        for cy in range(cy0, cy1 + 1):
            for cz in range(cz0, cz1 + 1):
                c = (cx * gy + cy) * gz + cz
                if start[c] == start[c + 1]:
                    continue
                dx = _gap(x0, x1, bmin[c, 0], bmax[c, 0])
                dy = _gap(y0, y1, bmin[c, 1], bmax[c, 1])
                dz = _gap(z0, z1, bmin[c, 2], bmax[c, 2])
                if -cbeta[c] * (dx * dx + dy * dy + dz * dz) < thr:
                    continue
                for i in range(start[c], start[c + 1]):
                    dx = _gap(x0, x1, kx[i], kx[i])
                    dy = _gap(y0, y1, ky[i], ky[i])
                    dz = _gap(z0, z1, kz[i], kz[i])
                    if -beta[i] * (dx * dx + dy * dy + dz * dz) >= thr:
                        cand[n] = i
                        n += 1
    return n


@njit(inline="always")
def _sweep(qx, qy, qz, kx, ky, kz, beta, cand, n, cutoff, keep_i, keep_a):
    """Max exponent over the candidates, keeping every term that may survive the cutoff.

    A term is discarded only once it is below the running max plus
    ``cutoff``; the max only grows, so the kept list (in candidate order)
    is a superset of the terms that pass against the final max.
    """
    m = -np.inf
    nk = 0
    for t in range(n):
        i = cand[t]
        dx = qx - kx[i]
        dy = qy - ky[i]
        dz = qz - kz[i]
        a = -beta[i] * (dx * dx + dy * dy + dz * dz)
        if a - m >= cutoff:
            keep_i[nk] = i
            keep_a[nk] = a
            nk += 1
            if a > m:
                m = a
    return m, nk


# -- forward ----------------------------------------------------------------------


@njit(cache=True)
def forward_range(q, order, qcid, qlo, qh, qdims, kx, ky, kz, beta, coeffs, ex, scl, lo, h,
                  dims, start, bmin, bmax, cbeta, beta_min, cutoff, full, cand, keep_i, keep_a, out, denom,
                  shift, s0, s1):
    prev = -1
    n = 0
    for s in range(s0, s1):
        if qcid[s] != prev:
            prev = qcid[s]
            n = _gather(prev, qlo, qh, qdims, kx, ky, kz, beta, lo, h, dims, start, bmin, bmax,
                        cbeta, beta_min, cutoff, full, cand)
        j = order[s]
        qx = q[j, 0]
        qy = q[j, 1]
        qz = q[j, 2]
        m, nk = _sweep(qx, qy, qz, kx, ky, kz, beta, cand, n, cutoff, keep_i, keep_a)
        e = 0.0
        num = 0.0
        for t in range(nk):
            a = keep_a[t] - m
            if a < cutoff:
                continue
            i = keep_i[t]
            dx = qx - kx[i]
            dy = qy - ky[i]
            dz = qz - kz[i]
            w = math.exp(a)
            e += w
            num += w * _poly(coeffs, i, ex, scl, dx, dy, dz)
        out[j] = num / e
        denom[j] = e
        shift[j] = m


@njit(cache=True)
def nrbf_range(q, order, qcid, qlo, qh, qdims, kx, ky, kz, beta, values, lo, h, dims, start,
               bmin, bmax, cbeta, beta_min, cutoff, full, cand, keep_i, keep_a, out, denom, shift, s0, s1):
    """Scalar-value variant of :func:`forward_range`."""
    prev = -1
    n = 0
    for s in range(s0, s1):
        if qcid[s] != prev:
            prev = qcid[s]
            n = _gather(prev, qlo, qh, qdims, kx, ky, kz, beta, lo, h, dims, start, bmin, bmax,
                        cbeta, beta_min, cutoff, full, cand)
        j = order[s]
        qx = q[j, 0]
        qy = q[j, 1]
        qz = q[j, 2]
        m, nk = _sweep(qx, qy, qz, kx, ky, kz, beta, cand, n, cutoff, keep_i, keep_a)
        e = 0.0
        num = 0.0
        for t in range(nk):
            a = keep_a[t] - m
            if a < cutoff:
                continue
            i = keep_i[t]
            dx = qx - kx[i]
            dy = qy - ky[i]
            dz = qz - kz[i]
            w = math.exp(a)
            e += w
            num += w * values[i]
        out[j] = num / e
        denom[j] = e
        shift[j] = m


@njit(cache=True)
def qgrad_range(q, order, qcid, qlo, qh, qdims, kx, ky, kz, beta, coeffs, ex, scl, lo, h, dims,
                start, bmin, bmax, cbeta, beta_min, cutoff, full, cand, keep_i, keep_a, out, denom, shift, grad,
                s0, s1):
    npoly = coeffs.shape[1]
    prev = -1
    n = 0
    for s in range(s0, s1):
        if qcid[s] != prev:
            prev = qcid[s]
            n = _gather(prev, qlo, qh, qdims, kx, ky, kz, beta, lo, h, dims, start, bmin, bmax,
                        cbeta, beta_min, cutoff, full, cand)
        j = order[s]
        qx = q[j, 0]
        qy = q[j, 1]
        qz = q[j, 2]
        m, nk = _sweep(qx, qy, qz, kx, ky, kz, beta, cand, n, cutoff, keep_i, keep_a)
        e = 0.0
        num = 0.0
        # running sums of w*grad f, w*beta*d and w*beta*d*f
        ax = 0.0
        ay = 0.0
        az = 0.0
        bx = 0.0
        by = 0.0
        bz = 0.0
        sx = 0.0
        sy = 0.0
        sz = 0.0
        for t in range(nk):
            a = keep_a[t] - m
            if a < cutoff:
                continue
            i = keep_i[t]
            dx = qx - kx[i]
            dy = qy - ky[i]
            dz = qz - kz[i]
            w = math.exp(a)
            x2 = dx * dx
            y2 = dy * dy
            z2 = dz * dz
            x3 = x2 * dx
            y3 = y2 * dy
            z3 = z2 * dz
            f = 0.0
            fx = 0.0
            fy = 0.0
            fz = 0.0
            for p in range(npoly):
                cp = coeffs[i, p] * scl[p]
                px = _pw(dx, x2, x3, ex[p, 0])
                py = _pw(dy, y2, y3, ex[p, 1])
                pz = _pw(dz, z2, z3, ex[p, 2])
                f += cp * px * py * pz
                fx += cp * _dpw(dx, x2, ex[p, 0]) * py * pz
                fy += cp * px * _dpw(dy, y2, ex[p, 1]) * pz
                fz += cp * px * py * _dpw(dz, z2, ex[p, 2])
            e += w
            num += w * f
            ax += w * fx
            ay += w * fy
            az += w * fz
            wb = w * beta[i]
            bx += wb * dx
            by += wb * dy
            bz += wb * dz
            sx += wb * dx * f
            sy += wb * dy * f
            sz += wb * dz * f
        o = num / e
        out[j] = o
        denom[j] = e
        shift[j] = m
        grad[j, 0] = (ax + 2.0 * (o * bx - sx)) / e
        grad[j, 1] = (ay + 2.0 * (o * by - sy)) / e
        grad[j, 2] = (az + 2.0 * (o * bz - sz)) / e


# -- backward ---------------------------------------------------------------------


@njit(cache=True)
def backward_range(q, up, out, denom, shift, order, qcid, qlo, qh, qdims, kx, ky, kz, beta,
                   coeffs, ex, scl, lo, h, dims, start, bmin, bmax, cbeta, beta_min, cutoff,
                   full, cand, gk, gb, gc, s0, s1):
    """Accumulate dL/dkey, dL/dbeta, dL/dcoeff over sorted query positions ``s0:s1``."""
    npoly = coeffs.shape[1]
    prev = -1
    n = 0
    for s in range(s0, s1):
        j = order[s]
        u = up[j]
        if u == 0.0:
            continue
        if qcid[s] != prev:
            prev = qcid[s]
            n = _gather(prev, qlo, qh, qdims, kx, ky, kz, beta, lo, h, dims, start, bmin, bmax,
                        cbeta, beta_min, cutoff, full, cand)
        qx = q[j, 0]
        qy = q[j, 1]
        qz = q[j, 2]
        m = shift[j]
        inv_e = 1.0 / denom[j]
        o = out[j]
        for t in range(n):
            i = cand[t]
            dx = qx - kx[i]
            dy = qy - ky[i]
            dz = qz - kz[i]
            d2 = dx * dx + dy * dy + dz * dz
            a = -beta[i] * d2 - m
            if a < cutoff:
                continue
            g = u * (math.exp(a) * inv_e)
            x2 = dx * dx
            y2 = dy * dy
            z2 = dz * dz
            x3 = x2 * dx
            y3 = y2 * dy
            z3 = z2 * dz
            f = 0.0
            fx = 0.0
            fy = 0.0
            fz = 0.0
            for p in range(npoly):
                px = _pw(dx, x2, x3, ex[p, 0])
                py = _pw(dy, y2, y3, ex[p, 1])
                pz = _pw(dz, z2, z3, ex[p, 2])
                b = scl[p] * px * py * pz
                cp = coeffs[i, p]
                f += cp * b
                gc[i, p] += g * b
                cs = cp * scl[p]
                fx += cs * _dpw(dx, x2, ex[p, 0]) * py * pz
                fy += cs * px * _dpw(dy, y2, ex[p, 1]) * pz
                fz += cs * px * py * _dpw(dz, z2, ex[p, 2])
            diff = f - o
            tt = 2.0 * beta[i] * diff
            # d f(q - k) / dk = -grad f
            gk[i, 0] += g * (tt * dx - fx)
            gk[i, 1] += g * (tt * dy - fy)
            gk[i, 2] += g * (tt * dz - fz)
            gb[i] += g * (-d2 * diff)


# -- parallel drivers -------------------------------------------------------------


@njit(cache=True, parallel=True)
def forward_parallel(q, order, qcid, qlo, qh, qdims, kx, ky, kz, beta, coeffs, ex, scl, lo, h,
                     dims, start, bmin, bmax, cbeta, beta_min, cutoff, full, cand, keep_i, keep_a, out, denom,
                     shift, bounds):
    for c in prange(bounds.shape[0] - 1):
        forward_range(q, order, qcid, qlo, qh, qdims, kx, ky, kz, beta, coeffs, ex, scl, lo, h,
                      dims, start, bmin, bmax, cbeta, beta_min, cutoff, full, cand[c], keep_i[c], keep_a[c], out,
                      denom, shift, bounds[c], bounds[c + 1])


@njit(cache=True, parallel=True)
def nrbf_parallel(q, order, qcid, qlo, qh, qdims, kx, ky, kz, beta, values, lo, h, dims, start,
                  bmin, bmax, cbeta, beta_min, cutoff, full, cand, keep_i, keep_a, out, denom, shift, bounds):
    for c in prange(bounds.shape[0] - 1):
        nrbf_range(q, order, qcid, qlo, qh, qdims, kx, ky, kz, beta, values, lo, h, dims, start,
                   bmin, bmax, cbeta, beta_min, cutoff, full, cand[c], keep_i[c], keep_a[c], out, denom, shift,
                   bounds[c], bounds[c + 1])


@njit(cache=True, parallel=True)
def qgrad_parallel(q, order, qcid, qlo, qh, qdims, kx, ky, kz, beta, coeffs, ex, scl, lo, h,
                   dims, start, bmin, bmax, cbeta, beta_min, cutoff, full, cand, keep_i, keep_a, out, denom,
                   shift, grad, bounds):
    for c in prange(bounds.shape[0] - 1):
        qgrad_range(q, order, qcid, qlo, qh, qdims, kx, ky, kz, beta, coeffs, ex, scl, lo, h,
                    dims, start, bmin, bmax, cbeta, beta_min, cutoff, full, cand[c], keep_i[c], keep_a[c], out, denom,
                    shift, grad, bounds[c], bounds[c + 1])


@njit(cache=True, parallel=True)
def backward_parallel(q, up, out, denom, shift, order, qcid, qlo, qh, qdims, kx, ky, kz, beta,
                      coeffs, ex, scl, lo, h, dims, start, bmin, bmax, cbeta, beta_min, cutoff,
                      full, cand, gk, gb, gc, bounds):
    # one private partial buffer per chunk
    for c in prange(bounds.shape[0] - 1):
        backward_range(q, up, out, denom, shift, order, qcid, qlo, qh, qdims, kx, ky, kz, beta,
                       coeffs, ex, scl, lo, h, dims, start, bmin, bmax, cbeta, beta_min, cutoff,
                       full, cand[c], gk[c], gb[c], gc[c], bounds[c], bounds[c + 1])


def chunk_bounds(n: int, workers: int) -> np.ndarray:
    workers = max(1, min(int(workers), max(n, 1)))
    return np.linspace(0, n, workers + 1).astype(np.int64)


def tree_reduce(parts: np.ndarray) -> np.ndarray:
    """Pairwise sum over axis 0 in a fixed order."""
    parts = list(parts)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def set_workers(workers: int) -> None:
    numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))
