"""Fitting loop: batch sampling, AdamW, mean-shift offset initialization."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .backward import GradBuffer, backward, mse_loss
from .engine import forward_streaming
from .errors import ConfigError, NumericalAbort
from .grid import InitSpec, ParamGrid, Variant, init_grid

# independent random streams derived from one seed
STREAM_INIT = 0
STREAM_SAMPLE = 1
STREAM_MEANSHIFT = 2
STREAM_SURFACE_KEYS = 3


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream),)))


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    learning_rate: float = 6e-4
    batch_volume: int = 16384
    batch_near: int = 16384
    iterations: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    near_surface_sigma: float = 0.01
    log_every: int = 10
    workers: int = 1
    mean_shift: bool = True
    mean_shift_points: int = 16384
    mean_shift_kernel: float = 100.0
    const_std: float = 0.1
    freeze: tuple[str, ...] = ()
    lr_schedule: str = "constant"
    lr_final: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_volume < 0 or self.batch_near < 0 or self.batch_volume + self.batch_near < 1:
            raise ConfigError("batch sizes must be >= 0 with at least one point per batch")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be > 0 and weight_decay >= 0")
        if self.iterations < 0 or self.log_every < 1 or self.workers < 1:
            raise ConfigError("iterations >= 0, log_every >= 1 and workers >= 1 required")
        if self.near_surface_sigma < 0:
            raise ConfigError("near_surface_sigma must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0 <= self.lr_final <= 1:
            raise ConfigError("lr_final must lie in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class GridConfig:
    """What to fit: variant, value degree, lattice resolution."""

    variant: str = "combined"
    degree: str = "1"
    resolution: int = 8
    learnable_scale: bool = True
    surface_keys: bool = False  # offset variant: start every key on a surface sample

    def __post_init__(self):
        self.variant = Variant.parse(self.variant).name.lower()
        if int(self.resolution) < 1:
            raise ConfigError(f"resolution must be >= 1, got {self.resolution}")
        self.resolution = int(self.resolution)
        self.degree = str(self.degree)
        if self.surface_keys and Variant.parse(self.variant) is not Variant.OFFSET:
            raise ConfigError("surface_keys applies to the offset variant only")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, grid: ParamGrid) -> "OptimizerState":
        return cls(np.zeros(grid.data.shape), np.zeros(grid.data.shape), 0)


@dataclass
class FitResult:
    grids: list[ParamGrid]
    history: np.ndarray  # (n, 2): iteration, loss
    seconds: float
    config: TrainConfig
    extra: dict = field(default_factory=dict)

    @property
    def grid(self) -> ParamGrid:
        return self.grids[0]

    @property
    def final_loss(self) -> float:
        return float(self.history[-1, 1]) if len(self.history) else float("nan")


# -- initialization ---------------------------------------------------------------


def mean_shift_init(grid: ParamGrid, surface_points, kernel: float = 100.0,
                    chunk: int = 256) -> ParamGrid:
    """Move the offset bank onto kernel-weighted means of nearby surface points.

    For each base key ``k`` the new position is the softmax-weighted mean of
    ``s_n`` with logits ``-kernel * |k - s_n|^2``; the stored offset is that
    mean minus ``k``.  Base keys are untouched.
    """
    s = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    if len(s) == 0:
        raise ConfigError("mean-shift initialization needs at least one surface point")
    lay = grid.layout
    if lay.offsets is None:
        raise ConfigError(f"{grid.variant.name.lower()} grids have no offset bank")
    k = grid.base_keys
    delta = np.empty_like(k)
    s2 = np.sum(s * s, axis=1)
    for a in range(0, len(k), chunk):
        kk = k[a:a + chunk]
        d2 = np.sum(kk * kk, axis=1)[:, None] - 2.0 * kk @ s.T + s2[None, :]
        logits = -kernel * np.maximum(d2, 0.0)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        delta[a:a + chunk] = w @ s - kk
    data = grid.data.copy()
    data[:, lay.offsets] = delta
    return grid.with_data(data)


def surface_key_init(grid: ParamGrid, surface_points) -> ParamGrid:
    """Place key ``i`` of an offset grid on ``surface_points[i]``."""
    s = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    if grid.variant is not Variant.OFFSET or len(s) != grid.num_keys:
        raise ConfigError("surface keys need an offset grid and one point per key")
    data = grid.data.copy()
    data[:, grid.layout.offsets] = s - grid.base_keys
    return grid.with_data(data)


def initial_grid(oracle, gcfg: GridConfig, cfg: TrainConfig,
                 init_stream: int = STREAM_INIT) -> ParamGrid:
    grid = init_grid(gcfg.variant, gcfg.degree, gcfg.resolution,
                     InitSpec(seed=cfg.seed, const_std=cfg.const_std), gcfg.learnable_scale,
                     rng=stream_rng(cfg.seed, init_stream))
    if gcfg.surface_keys:
        pts = oracle.sample_surface(grid.num_keys, stream_rng(cfg.seed, STREAM_SURFACE_KEYS))
        grid = surface_key_init(grid, pts)
    elif cfg.mean_shift and grid.layout.offsets is not None:
        pts = oracle.sample_surface(cfg.mean_shift_points, stream_rng(cfg.seed, STREAM_MEANSHIFT))
        grid = mean_shift_init(grid, pts, cfg.mean_shift_kernel)
    return grid


# -- per-step pieces -----------------------------------------------------------------


def sample_batch(oracle, cfg: TrainConfig, rng: np.random.Generator):
    """``batch_volume`` uniform points in [-1, 1]^3, then ``batch_near`` jittered surface points."""
    parts = [rng.uniform(-1.0, 1.0, (cfg.batch_volume, 3))]
    if cfg.batch_near > 0:
        s = oracle.sample_surface(cfg.batch_near, rng)
        parts.append(s + cfg.near_surface_sigma * rng.standard_normal(s.shape))
    q = np.concatenate(parts)
    return q, np.asarray(oracle.distance(q), dtype=np.float64)


def learning_rate_at(cfg: TrainConfig, it: int) -> float:
    """Step size for iteration ``it``; ``cosine`` anneals to ``lr_final * learning_rate``."""
    if cfg.lr_schedule == "constant" or cfg.iterations <= 1:
        return cfg.learning_rate
    t = min(it, cfg.iterations - 1) / (cfg.iterations - 1)
    lo = cfg.lr_final
    return cfg.learning_rate * (lo + (1.0 - lo) * 0.5 * (1.0 + math.cos(math.pi * t)))


def adamw_step(grid: ParamGrid, grads: GradBuffer, state: OptimizerState,
               cfg: TrainConfig, lr: float | None = None) -> tuple[ParamGrid, OptimizerState]:
    """One AdamW update; decay touches polynomial coefficients only."""
    lr = cfg.learning_rate if lr is None else lr
    g = grads.data if isinstance(grads, GradBuffer) else np.asarray(grads, dtype=np.float64)
    if g.shape != grid.data.shape or state.m.shape != grid.data.shape:
        raise ConfigError(f"gradient shape {g.shape} does not match parameters {grid.data.shape}")
    step = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (g * g)
    mhat = m / (1.0 - cfg.beta1 ** step)
    vhat = v / (1.0 - cfg.beta2 ** step)
    p = grid.data.astype(np.float64, copy=True)
    if cfg.weight_decay:
        cols = grid.decay_mask()
        p[:, cols] *= 1.0 - lr * cfg.weight_decay
    p -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return grid.with_data(p), OptimizerState(m, v, step)


# -- loop ------------------------------------------------------------------------------


class SingleModel:
    """One grid trained directly on the MSE loss."""

    def __init__(self, grid: ParamGrid, cfg: TrainConfig, frozen: tuple[str, ...] = ()):
        self.grids = [grid]
        self.cfg = cfg
        self.frozen = tuple(frozen)

    def forward(self, q):
        batch = forward_streaming(self.grids[0], q, self.cfg.workers)
        return batch.outputs, batch

    def backward(self, ctx, upstream):
        return [backward(self.grids[0], ctx, upstream, self.cfg.workers, self.frozen)]


def train(model, oracle, cfg: TrainConfig, callback=None) -> FitResult:
    """Run sample -> forward -> loss -> backward -> AdamW for ``cfg.iterations`` steps.

    ``model`` exposes ``grids``, ``forward(q) -> (pred, ctx)`` and
    ``backward(ctx, upstream) -> [GradBuffer per grid]``.
    """
    rng = stream_rng(cfg.seed, STREAM_SAMPLE)
    states = [OptimizerState.zeros_like(g) for g in model.grids]
    history = []
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*outside the lattice hull.*")
        for it in range(cfg.iterations):
            q, tgt = sample_batch(oracle, cfg, rng)
            pred, ctx = model.forward(q)
            loss, up = mse_loss(pred, tgt)
            if not math.isfinite(loss):
                history.append((it, loss))
                raise NumericalAbort(
                    f"loss became {loss} at iteration {it}",
                    snapshot={"iteration": it, "history": np.array(history),
                              "grids": [g.copy() for g in model.grids],
                              "config": cfg.as_dict()})
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                history.append((it, loss))
            grads = model.backward(ctx, up)
            lr = learning_rate_at(cfg, it)
            for b, g in enumerate(grads):
                model.grids[b], states[b] = adamw_step(model.grids[b], g, states[b], cfg, lr)
            if not all(np.all(np.isfinite(g.data)) for g in model.grids):
                raise NumericalAbort(
                    f"parameters became non-finite after iteration {it}",
                    snapshot={"iteration": it, "history": np.array(history),
                              "grids": [g.copy() for g in model.grids],
                              "config": cfg.as_dict()})
            if callback is not None:
                callback(it, loss, model)
    return FitResult(list(model.grids), np.array(history, dtype=np.float64).reshape(-1, 2),
                     time.perf_counter() - t0, cfg)


def fit(oracle, gcfg: GridConfig | None = None, cfg: TrainConfig | None = None,
        grid: ParamGrid | None = None, callback=None) -> FitResult:
    """Fit one grid to ``oracle``; returns the trained grid and loss history."""
    gcfg = gcfg or GridConfig()
    cfg = cfg or TrainConfig()
    if grid is None:
        grid = initial_grid(oracle, gcfg, cfg)
    frozen = tuple(cfg.freeze)
    return train(SingleModel(grid, cfg, frozen), oracle, cfg, callback)


__all__ = [
    "FitResult", "GridConfig", "OptimizerState", "SingleModel", "TrainConfig", "adamw_step",
    "fit", "initial_grid", "learning_rate_at", "mean_shift_init", "sample_batch", "stream_rng",
    "surface_key_init", "train",
]
