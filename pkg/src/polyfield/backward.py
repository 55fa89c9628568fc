"""Manual backward pass and the MSE loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .engine import EvalBatch, _alloc, check_queries, make_plan, trilinear_weights
from .errors import ConfigError, ContractError
from .grid import ParamGrid, Variant


@dataclass
class GradBuffer:
    """dL/dtheta laid out exactly like ``ParamGrid.data``."""

    data: np.ndarray
    count: int = 0

    @classmethod
    def zeros_like(cls, grid: ParamGrid) -> "GradBuffer":
        return cls(np.zeros(grid.data.shape), 0)

    def __iadd__(self, other: "GradBuffer") -> "GradBuffer":
        if other.data.shape != self.data.shape:
            raise ConfigError("gradient buffers have different shapes")
        self.data += other.data
        self.count += other.count
        return self


def mse_loss(predictions, targets) -> tuple[float, np.ndarray]:
    pred = np.asarray(predictions, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ConfigError(f"prediction/target length mismatch: {pred.shape} vs {tgt.shape}")
    n = pred.size
    if n < 1:
        raise ConfigError("loss needs at least one query")
    diff = pred - tgt
    return float(np.dot(diff, diff) / n), (2.0 / n) * diff


def backward_keys(keyset, batch: EvalBatch, upstream, workers: int = 1, cull: bool = True):
    """Raw gradients over a flat key set: ``(dL/dkeys, dL/dbeta, dL/dcoeffs, beta)``."""
    if batch.denom is None or batch.shift is None:
        raise ContractError("batch is missing the saved softmax denominators; run a forward pass")
    q = check_queries(batch.queries)
    up = np.ascontiguousarray(upstream, dtype=np.float64)
    if up.shape != (len(q),):
        raise ConfigError("upstream gradient must have one entry per query")
    plan = make_plan(keyset, q, workers, cull)
    ix = plan.index
    n_keys = len(ix)
    npoly = ix.coeffs.shape[1]
    nparts = len(plan.bounds) - 1
    gk = _alloc("grad_keys", "key", (nparts, n_keys, 3), fill=0.0)
    gb = _alloc("grad_beta", "key", (nparts, n_keys), fill=0.0)
    gc = _alloc("grad_coeffs", "key", (nparts, n_keys, npoly), fill=0.0)
    out = np.ascontiguousarray(batch.outputs, dtype=np.float64)
    denom = np.ascontiguousarray(batch.denom, dtype=np.float64)
    shift = np.ascontiguousarray(batch.shift, dtype=np.float64)
    if plan.parallel:
        kernels.backward_parallel(q, up, out, denom, shift, *plan.args(), plan.cand, gk, gb, gc,
                                  plan.bounds)
    else:
        kernels.backward_range(q, up, out, denom, shift, *plan.args(), plan.cand[0], gk[0],
                               gb[0], gc[0], 0, len(q))
    # undo the cell sort
    inv = np.empty_like(ix.perm)
    inv[ix.perm] = np.arange(n_keys)
    gk, gb, gc = kernels.tree_reduce(gk), kernels.tree_reduce(gb), kernels.tree_reduce(gc)
    return gk[inv], gb[inv], gc[inv], ix.beta[inv]


def backward(grid: ParamGrid, batch: EvalBatch, upstream, workers: int = 1,
             frozen: tuple[str, ...] = (), cull: bool = True) -> GradBuffer:
    """dL/dtheta for every stored channel of ``grid``.

    ``frozen`` names layout groups (``"offsets"``, ``"log_scale"``, ...)
    whose gradient is forced to zero.
    """
    if grid.variant is Variant.TRILINEAR:
        return _backward_trilinear(grid, batch, upstream)
    g_keys, g_beta, g_coeffs, beta = backward_keys(grid.keyset(), batch, upstream, workers, cull)
    # log-parameterized scales: dL/dlog_beta = beta * dL/dbeta
    data = grid.fold_key_grads(g_keys, g_beta * beta, g_coeffs)
    if frozen:
        data[:, grid.group_mask(*frozen)] = 0.0
    return GradBuffer(data, len(batch))


def _backward_trilinear(grid: ParamGrid, batch: EvalBatch, upstream) -> GradBuffer:
    up = np.asarray(upstream, dtype=np.float64)
    idx, w, _, _ = trilinear_weights(grid.resolution, batch.queries)
    g = np.bincount(idx.ravel(), weights=(w * up[:, None]).ravel(), minlength=grid.num_keys)
    return GradBuffer(g.reshape(-1, 1), len(up))
