"""Cosine-series band decomposition and half-space grid splicing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backward import backward
from .engine import check_queries, forward_streaming
from .errors import ConfigError
from .grid import ParamGrid, load_stack, save_stack
from .trainer import FitResult, GridConfig, TrainConfig, initial_grid, train

BAND_STREAM_BASE = 100


@dataclass
class CosineStack:
    """``S(q) = sum_b w_b(q) O_b(q)`` with ``w_b(q) = prod_d cos(b pi q_d)``."""

    bands: list[ParamGrid]

    def __post_init__(self):
        self.bands = list(self.bands)
        if not self.bands:
            raise ConfigError("a cosine stack needs at least one band")
        ref = self.bands[0]
        for g in self.bands[1:]:
            if (g.variant, g.degree, g.resolution, g.learnable_scale) != (
                    ref.variant, ref.degree, ref.resolution, ref.learnable_scale):
                raise ConfigError("all bands must share variant, degree, resolution and scale mode")

    @property
    def num_bands(self) -> int:
        """``B``: the highest band index."""
        return len(self.bands) - 1

    def param_count(self) -> int:
        return sum(g.param_count() for g in self.bands)

    def save(self, path) -> None:
        save_stack(self.bands, path)

    @classmethod
    def load(cls, path) -> "CosineStack":
        return cls(load_stack(path))


def cosine_weights(queries, num_bands: int) -> np.ndarray:
    """``(J, B + 1)`` separable cosine weights; column 0 is exactly 1."""
    q = check_queries(queries)
    w = np.empty((len(q), num_bands + 1))
    w[:, 0] = 1.0
    for b in range(1, num_bands + 1):
        w[:, b] = np.prod(np.cos(b * np.pi * q), axis=1)
    return w


def band_outputs(stack: CosineStack, queries, workers: int = 1) -> np.ndarray:
    q = check_queries(queries)
    return np.stack([forward_streaming(g, q, workers).outputs for g in stack.bands], axis=1)


def cosine_eval(stack: CosineStack, queries, workers: int = 1) -> np.ndarray:
    q = check_queries(queries)
    w = cosine_weights(q, stack.num_bands)
    out = w[:, 0] * forward_streaming(stack.bands[0], q, workers).outputs
    for b in range(1, len(stack.bands)):
        out = out + w[:, b] * forward_streaming(stack.bands[b], q, workers).outputs
    return out


def partial_sums(stack: CosineStack, queries, workers: int = 1) -> np.ndarray:
    """``(B + 1, J)``: row ``b`` is the sum of bands ``0..b``."""
    q = check_queries(queries)
    terms = cosine_weights(q, stack.num_bands) * band_outputs(stack, q, workers)
    return np.cumsum(terms, axis=1).T


class CosineModel:
    """Training adapter: each band sees the upstream gradient scaled by its weight."""

    def __init__(self, bands, cfg: TrainConfig, frozen: tuple[str, ...] = ()):
        self.grids = list(bands)
        self.cfg = cfg
        self.frozen = tuple(frozen)

    def forward(self, q):
        w = cosine_weights(q, len(self.grids) - 1)
        batches = [forward_streaming(g, q, self.cfg.workers) for g in self.grids]
        out = w[:, 0] * batches[0].outputs
        for b in range(1, len(batches)):
            out = out + w[:, b] * batches[b].outputs
        return out, (batches, w)

    def backward(self, ctx, upstream):
        batches, w = ctx
        return [backward(g, bt, upstream * w[:, b], self.cfg.workers, self.frozen)
                for b, (g, bt) in enumerate(zip(self.grids, batches))]


def cosine_fit(oracle, num_bands: int, gcfg: GridConfig | None = None,
               cfg: TrainConfig | None = None, callback=None) -> tuple[CosineStack, FitResult]:
    """Jointly fit bands ``0..B``.

    Band 0 is initialized exactly like a plain fit with the same seed; higher
    bands start from zero coefficients so training begins at the band-0 field.
    """
    if num_bands < 0:
        raise ConfigError("number of bands must be >= 0")
    gcfg = gcfg or GridConfig()
    cfg = cfg or TrainConfig()
    bands = [initial_grid(oracle, gcfg, cfg)]
    for b in range(1, num_bands + 1):
        g = initial_grid(oracle, gcfg, cfg, init_stream=BAND_STREAM_BASE + b)
        data = g.data.copy()
        data[:, g.decay_mask()] = 0.0
        bands.append(g.with_data(data))
    result = train(CosineModel(bands, cfg, tuple(cfg.freeze)), oracle, cfg, callback)
    return CosineStack(result.grids), result


# -- splicing ---------------------------------------------------------------------------


def splice_grids(grid_a: ParamGrid, grid_b: ParamGrid, axis: int = 0,
                 threshold: float = 0.0) -> ParamGrid:
    """Keys whose base lattice coordinate along ``axis`` is below ``threshold`` take
    ``grid_a``'s channels (offsets included); all other keys take ``grid_b``'s."""
    if (grid_a.variant, grid_a.degree, grid_a.resolution, grid_a.learnable_scale) != (
            grid_b.variant, grid_b.degree, grid_b.resolution, grid_b.learnable_scale):
        raise ConfigError("splice needs grids with identical variant, degree, resolution "
                          "and scale mode")
    if axis not in (0, 1, 2):
        raise ConfigError("splice axis must be 0, 1 or 2")
    if grid_a.data.dtype != grid_b.data.dtype:
        raise ConfigError("splice needs grids with the same storage dtype")
    side_a = splice_mask(grid_a, axis, threshold)
    data = np.where(side_a[:, None], grid_a.data, grid_b.data)
    return grid_a.with_data(data)


def splice_mask(grid: ParamGrid, axis: int, threshold: float) -> np.ndarray:
    return grid.base_keys[:, axis] < threshold
