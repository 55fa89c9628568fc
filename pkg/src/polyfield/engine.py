"""Forward evaluation: naive oracle, streaming kernel, trilinear baseline, query gradients."""

from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, NumericalAbort
from .grid import KeySet, ParamGrid, Variant
from .poly import basis, basis_grad, exponents, monomial_scales


@dataclass
class EvalBatch:
    """Queries with their outputs and the state saved for the backward pass.

    ``denom`` is the max-shifted softmax denominator (always >= 1) and
    ``shift`` the per-query maximum exponent; the unshifted denominator
    is ``denom * exp(shift)`` (see :attr:`e`).
    """

    queries: np.ndarray
    outputs: np.ndarray
    denom: np.ndarray | None = None
    shift: np.ndarray | None = None
    grads: np.ndarray | None = None
    clamped: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.outputs)

    @property
    def e(self) -> np.ndarray:
        return self.denom * np.exp(self.shift)

    def subset(self, idx) -> "EvalBatch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return EvalBatch(self.queries[idx], self.outputs[idx], pick(self.denom),
                         pick(self.shift), pick(self.grads), pick(self.clamped))


# -- workspace accounting -----------------------------------------------------


@dataclass
class Workspace:
    """Records every transient array the engine allocates.

    ``scope`` is ``"query"`` for arrays whose length is the number of
    queries, ``"key"`` for per-key/per-worker parameter-sized buffers.
    """

    records: list[tuple[str, str, int, tuple]] = field(default_factory=list)

    def add(self, name: str, scope: str, arr: np.ndarray) -> np.ndarray:
        self.records.append((name, scope, int(arr.nbytes), tuple(arr.shape)))
        return arr

    def bytes(self, scope: str | None = None) -> int:
        return sum(b for _, s, b, _ in self.records if scope is None or s == scope)

    @property
    def largest(self) -> int:
        return max((b for _, _, b, _ in self.records), default=0)

    def shapes(self) -> list[tuple]:
        return [r[3] for r in self.records]


_ACTIVE: list[Workspace] = []


@contextlib.contextmanager
def track_workspace():
    ws = Workspace()
    _ACTIVE.append(ws)
    try:
        yield ws
    finally:
        _ACTIVE.remove(ws)


def _alloc(name: str, scope: str, shape, dtype=np.float64, fill=None) -> np.ndarray:
    arr = np.empty(shape, dtype=dtype) if fill is None else np.full(shape, fill, dtype=dtype)
    for ws in _ACTIVE:
        ws.add(name, scope, arr)
    return arr


def _track(name: str, scope: str, arr: np.ndarray) -> np.ndarray:
    for ws in _ACTIVE:
        ws.add(name, scope, arr)
    return arr


# -- helpers -------------------------------------------------------------------


def check_queries(queries) -> np.ndarray:
    q = np.ascontiguousarray(queries, dtype=np.float64)
    if q.ndim == 1 and q.shape[0] == 3:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != 3:
        raise ConfigError(f"queries must have shape (J, 3), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ConfigError("queries contain NaN or infinite coordinates")
    return q


def pack_keys(keyset: KeySet, cull: bool = True) -> kernels.KeyIndex:
    """Sort keys into the spatial cell index used by every streaming kernel."""
    if len(keyset) == 0:
        raise ConfigError("key set is empty")
    with np.errstate(over="ignore"):
        beta = np.exp(np.asarray(keyset.log_scale, dtype=np.float64))
    if not (np.all(np.isfinite(keyset.keys)) and np.all(np.isfinite(beta))
            and np.all(np.isfinite(keyset.coeffs))):
        raise NumericalAbort("non-finite keys, scales or coefficients")
    idx = kernels.build_index(keyset.keys, beta,
                              keyset.coeffs, exponents(keyset.degree),
                              monomial_scales(keyset.degree), cull=cull)
    for ws in _ACTIVE:
        ws.add("key_index", "key", np.empty(idx.nbytes, dtype=np.uint8))
    return idx


def _as_keyset(source) -> KeySet:
    if isinstance(source, KeySet):
        return source
    return source.keyset()


# -- naive oracle --------------------------------------------------------------


def naive_terms(keyset: KeySet, q: np.ndarray):
    """Full ``(J, K)`` softmax weights and value-function matrix."""
    rel = q[:, None, :] - keyset.keys[None, :, :]
    beta = np.exp(keyset.log_scale)
    logits = -beta[None, :] * np.sum(rel * rel, axis=-1)
    shift = logits.max(axis=1, keepdims=True)
    p = np.exp(logits - shift)
    denom = p.sum(axis=1)
    f = np.einsum("jkp,kp->jk", basis(rel, keyset.degree), keyset.coeffs)
    return p, denom, shift[:, 0], f, rel, beta


def forward_naive(grid, queries) -> EvalBatch:
    """Materializes every query/key term; used as the correctness oracle."""
    q = check_queries(queries)
    if isinstance(grid, ParamGrid) and grid.variant is Variant.TRILINEAR:
        return forward_trilinear(grid, q)
    ks = _as_keyset(grid)
    if len(ks) == 0:
        raise ConfigError("key set is empty")
    p, denom, shift, f, _, _ = naive_terms(ks, q)
    out = (p * f).sum(axis=1) / denom
    return EvalBatch(q, out, denom, shift)


def query_gradient_naive(grid, queries) -> np.ndarray:
    q = check_queries(queries)
    ks = _as_keyset(grid)
    p, denom, _, f, rel, beta = naive_terms(ks, q)
    w = p / denom[:, None]
    out = (w * f).sum(axis=1)
    gf = np.einsum("jkpd,kp->jkd", basis_grad(rel, ks.degree), ks.coeffs)
    g = gf + 2.0 * beta[None, :, None] * rel * (out[:, None] - f)[..., None]
    return np.einsum("jk,jkd->jd", w, g)


# -- streaming kernels ---------------------------------------------------------


@dataclass
class Plan:
    """Everything a streaming kernel call needs besides the per-query outputs."""

    index: kernels.KeyIndex
    tiling: kernels.QueryTiling
    cand: np.ndarray  # (chunks, K) candidate buffer per chunk
    keep_i: np.ndarray  # (chunks, K) surviving terms of one query
    keep_a: np.ndarray
    bounds: np.ndarray

    @property
    def parallel(self) -> bool:
        return len(self.bounds) > 2

    def args(self):
        return (*self.tiling.arrays(), *self.index.arrays())

    def scalar_args(self, values):
        a = self.index.arrays()
        return (*self.tiling.arrays(), *a[:4], values, *a[7:])


def make_plan(keyset: KeySet, q: np.ndarray, workers: int = 1, cull: bool = True) -> Plan:
    ix = pack_keys(keyset, cull)
    tiling = kernels.build_tiling(q, cull)
    _track("query_order", "query", tiling.order)
    _track("query_cells", "query", tiling.qcid)
    bounds = kernels.chunk_bounds(len(q), workers)
    cand = _alloc("candidates", "key", (len(bounds) - 1, len(ix)), dtype=np.int64)
    keep_i = _alloc("kept_terms", "key", (len(bounds) - 1, len(ix)), dtype=np.int64)
    keep_a = _alloc("kept_exponents", "key", (len(bounds) - 1, len(ix)))
    if len(bounds) > 2:
        kernels.set_workers(workers)
    return Plan(ix, tiling, cand, keep_i, keep_a, bounds)


def forward_streaming(grid, queries, workers: int = 1, cull: bool = True) -> EvalBatch:
    """Streaming forward pass, O(J) per-query workspace."""
    q = check_queries(queries)
    if isinstance(grid, ParamGrid) and grid.variant is Variant.TRILINEAR:
        return forward_trilinear(grid, q)
    plan = make_plan(_as_keyset(grid), q, workers, cull)
    n = len(q)
    out = _alloc("outputs", "query", n)
    denom = _alloc("denom", "query", n)
    shift = _alloc("shift", "query", n)
    if isinstance(grid, ParamGrid) and grid.variant is Variant.NRBF:
        _run_nrbf(plan, q, np.ascontiguousarray(plan.index.coeffs[:, 0]), out, denom, shift)
    elif plan.parallel:
        kernels.forward_parallel(q, *plan.args(), plan.cand, plan.keep_i, plan.keep_a, out, denom, shift, plan.bounds)
    else:
        kernels.forward_range(q, *plan.args(), plan.cand[0], plan.keep_i[0], plan.keep_a[0], out, denom, shift, 0, n)
    return EvalBatch(q, out, denom, shift)


def _run_nrbf(plan: Plan, q, values, out, denom, shift) -> None:
    if plan.parallel:
        kernels.nrbf_parallel(q, *plan.scalar_args(values), plan.cand, plan.keep_i, plan.keep_a, out, denom, shift,
                              plan.bounds)
    else:
        kernels.nrbf_range(q, *plan.scalar_args(values), plan.cand[0], plan.keep_i[0], plan.keep_a[0], out, denom, shift, 0,
                           len(q))


def nrbf_formula(keys, log_scale, values, queries, workers: int = 1) -> np.ndarray:
    """Scalar-valued normalized RBF with the same streamed sweep as the polynomial path."""
    q = check_queries(queries)
    ks = KeySet(np.asarray(keys, float), np.asarray(log_scale, float),
                np.asarray(values, float).reshape(-1, 1), 0)
    plan = make_plan(ks, q, workers)
    n = len(q)
    out, denom, shift = np.empty(n), np.empty(n), np.empty(n)
    _run_nrbf(plan, q, np.ascontiguousarray(plan.index.coeffs[:, 0]), out, denom, shift)
    return out


def query_gradient(grid, queries, workers: int = 1, cull: bool = True) -> EvalBatch:
    """Outputs plus analytic dO/dq for each query (streamed like the forward pass)."""
    q = check_queries(queries)
    if isinstance(grid, ParamGrid) and grid.variant is Variant.TRILINEAR:
        batch = forward_trilinear(grid, q)
        batch.grads = trilinear_gradient(grid, q)
        return batch
    plan = make_plan(_as_keyset(grid), q, workers, cull)
    n = len(q)
    out = _alloc("outputs", "query", n)
    denom = _alloc("denom", "query", n)
    shift = _alloc("shift", "query", n)
    grad = _alloc("grads", "query", (n, 3))
    if plan.parallel:
        kernels.qgrad_parallel(q, *plan.args(), plan.cand, plan.keep_i, plan.keep_a, out, denom, shift, grad, plan.bounds)
    else:
        kernels.qgrad_range(q, *plan.args(), plan.cand[0], plan.keep_i[0], plan.keep_a[0], out, denom, shift, grad, 0, n)
    return EvalBatch(q, out, denom, shift, grads=grad)


def evaluate(grid, queries, workers: int = 1, chunk: int = 65536) -> np.ndarray:
    """Outputs only, in chunks to bound memory for very large query sets."""
    q = check_queries(queries)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        out[s:s + chunk] = forward_streaming(grid, q[s:s + chunk], workers).outputs
    return out


# -- trilinear baseline -------------------------------------------------------


def trilinear_weights(resolution: int, queries):
    """Corner indices ``(J, 8)``, weights ``(J, 8)``, local coords and a clamp mask."""
    q = check_queries(queries)
    r = int(resolution)
    if r < 2:
        raise ConfigError("trilinear interpolation needs resolution >= 2")
    clamped = np.any((q < -1.0) | (q > 1.0), axis=1)
    qc = np.clip(q, -1.0, 1.0)
    u = (qc + 1.0) * 0.5 * (r - 1)
    base = np.minimum(np.floor(u).astype(np.int64), r - 2)
    t = u - base
    idx = np.empty((len(q), 8), dtype=np.int64)
    w = np.empty((len(q), 8))
    corner = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz
                idx[:, corner] = (ix * r + iy) * r + iz
                wx = t[:, 0] if dx else 1.0 - t[:, 0]
                wy = t[:, 1] if dy else 1.0 - t[:, 1]
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                w[:, corner] = wx * wy * wz
                corner += 1
    return idx, w, t, clamped


def forward_trilinear(grid: ParamGrid, queries) -> EvalBatch:
    if grid.variant is not Variant.TRILINEAR:
        raise ConfigError("forward_trilinear needs a trilinear grid")
    q = check_queries(queries)
    idx, w, _, clamped = trilinear_weights(grid.resolution, q)
    if clamped.any():
        warnings.warn(f"{int(clamped.sum())} queries outside the lattice hull were clamped",
                      stacklevel=2)
    values = grid.data[:, 0].astype(np.float64)
    out = np.sum(values[idx] * w, axis=1)
    return EvalBatch(q, out, np.ones(len(q)), np.zeros(len(q)), clamped=clamped)


def trilinear_gradient(grid: ParamGrid, queries) -> np.ndarray:
    q = check_queries(queries)
    r = grid.resolution
    idx, _, t, clamped = trilinear_weights(r, q)
    v = grid.data[:, 0].astype(np.float64)[idx]
    scale = 0.5 * (r - 1)
    g = np.zeros((len(q), 3))
    corner = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wx = t[:, 0] if dx else 1.0 - t[:, 0]
                wy = t[:, 1] if dy else 1.0 - t[:, 1]
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                sz = 1.0 if dz else -1.0
                g[:, 0] += v[:, corner] * sx * wy * wz
                g[:, 1] += v[:, corner] * wx * sy * wz
                g[:, 2] += v[:, corner] * wx * wy * sz
                corner += 1
    g *= scale
    g[clamped] = 0.0
    return g
