"""Parameter grids: variants, channel layout, initialization and the ``.efg`` file format.

Every variant stores its learnable parameters as one dense ``(R**3, C)``
array, one row per lattice key.  Channel order per key:

========================  ===================================================
variant                   channels
========================  ===================================================
``trilinear``             ``value``
``nrbf``                  ``value, log_scale``
``func``                  ``phi[0:P], log_scale``
``offset``                ``delta[0:3], phi[0:P], log_scale``
``combined``              ``phi[0:P], log_scale, delta[0:3], phi'[0:P], log_scale'``
========================  ===================================================

``P`` is the number of polynomial coefficients (1/4/10/20, or 8 for
``cube``).  With ``learnable_scale=False`` the ``log_scale`` channels are
not stored and every key uses ``FIXED_LOG_SCALE``.  Base lattice keys are
never stored: they are implied by ``R``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .poly import CUBE, degree_name, num_coeffs, parse_degree

INIT_LOG_SCALE = 7.0
FIXED_LOG_SCALE = INIT_LOG_SCALE

MAGIC = b"EFGR"
STACK_MAGIC = b"EFGS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBBII")
_STACK_HEADER = struct.Struct("<4sII")
_FIXED_SCALE_BIT = 0x80


class Variant(IntEnum):
    TRILINEAR = 0
    NRBF = 1
    FUNC = 2
    OFFSET = 3
    COMBINED = 4

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, Variant):
            return value
        if isinstance(value, str):
            key = value.strip().lower().replace("-", "_")
            aliases = {
                "trilinear": cls.TRILINEAR,
                "nrbf": cls.NRBF,
                "func": cls.FUNC,
                "funcinterp": cls.FUNC,
                "func_interp": cls.FUNC,
                "offset": cls.OFFSET,
                "offsetonly": cls.OFFSET,
                "offset_only": cls.OFFSET,
                "combined": cls.COMBINED,
            }
            if key in aliases:
                return aliases[key]
            raise ConfigError(f"unknown variant {value!r}")
        try:
            return cls(int(value))
        except ValueError:
            raise ConfigError(f"unknown variant {value!r}") from None


def _check_combo(variant: Variant, degree: int) -> None:
    if variant is Variant.NRBF and degree != 0:
        raise ConfigError("nrbf stores scalar values; degree must be 0")


def num_channels(variant, degree=0, learnable_scale: bool = True) -> int:
    variant = Variant.parse(variant)
    degree = parse_degree(degree)
    _check_combo(variant, degree)
    if variant is Variant.TRILINEAR:
        return 1
    p = num_coeffs(degree)
    s = 1 if learnable_scale else 0
    if variant in (Variant.NRBF, Variant.FUNC):
        return p + s
    if variant is Variant.OFFSET:
        return 3 + p + s
    return 2 * (p + s) + 3


def param_count(variant, degree=0, resolution: int = 1, learnable_scale: bool = True) -> int:
    """Total stored floats, ``R**3 * C``."""
    return int(resolution) ** 3 * num_channels(variant, degree, learnable_scale)


def lattice_axis(resolution: int) -> np.ndarray:
    if resolution < 1:
        raise ConfigError(f"resolution must be >= 1, got {resolution}")
    if resolution == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, resolution)


def lattice(resolution: int) -> np.ndarray:
    """Base keys, ``(R**3, 3)``, x-major (index ``(ix*R + iy)*R + iz``)."""
    ax = lattice_axis(resolution)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass(frozen=True)
class Layout:
    """Column slices of each parameter group inside the ``(R**3, C)`` array."""

    coeffs: slice | None = None
    log_scale: int | None = None
    offsets: slice | None = None
    coeffs2: slice | None = None
    log_scale2: int | None = None

    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}

        def cols(s):
            if s is None:
                return []
            if isinstance(s, int):
                return [s]
            return list(range(s.start, s.stop))

        for name in ("coeffs", "log_scale", "offsets", "coeffs2", "log_scale2"):
            c = cols(getattr(self, name))
            if c:
                out[name] = c
        return out


def layout_for(variant, degree, learnable_scale: bool = True) -> Layout:
    variant = Variant.parse(variant)
    degree = parse_degree(degree)
    if variant is Variant.TRILINEAR:
        return Layout(coeffs=slice(0, 1))
    p = num_coeffs(degree)
    s = 1 if learnable_scale else 0
    if variant in (Variant.NRBF, Variant.FUNC):
        return Layout(coeffs=slice(0, p), log_scale=p if s else None)
    if variant is Variant.OFFSET:
        return Layout(offsets=slice(0, 3), coeffs=slice(3, 3 + p), log_scale=3 + p if s else None)
    base = p + s
    return Layout(
        coeffs=slice(0, p),
        log_scale=p if s else None,
        offsets=slice(base, base + 3),
        coeffs2=slice(base + 3, base + 3 + p),
        log_scale2=base + 3 + p if s else None,
    )


@dataclass(frozen=True)
class KeySet:
    """Flattened keys of all banks, as consumed by the evaluation kernels."""

    keys: np.ndarray  # (K, 3)
    log_scale: np.ndarray  # (K,)
    coeffs: np.ndarray  # (K, P)
    degree: int

    @property
    def beta(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def __len__(self) -> int:
        return len(self.keys)


@dataclass(frozen=True, eq=False)
class ParamGrid:
    variant: Variant
    degree: int
    resolution: int
    data: np.ndarray
    learnable_scale: bool = True
    base_keys: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        variant = Variant.parse(self.variant)
        degree = 0 if variant is Variant.TRILINEAR else parse_degree(self.degree)
        _check_combo(variant, degree)
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "degree", degree)
        r = int(self.resolution)
        if r < 1:
            raise ConfigError(f"resolution must be >= 1, got {r}")
        object.__setattr__(self, "resolution", r)
        c = num_channels(variant, degree, self.learnable_scale)
        data = np.asarray(self.data)
        if data.shape != (r**3, c):
            raise ConfigError(f"parameter array has shape {data.shape}, expected {(r**3, c)}")
        object.__setattr__(self, "data", data)
        if self.base_keys is None:
            object.__setattr__(self, "base_keys", lattice(r))

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def num_keys(self) -> int:
        return self.data.shape[0]

    @property
    def layout(self) -> Layout:
        return layout_for(self.variant, self.degree, self.learnable_scale)

    @property
    def banks(self) -> int:
        return 2 if self.variant is Variant.COMBINED else 1

    def param_count(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray) -> "ParamGrid":
        return replace(self, data=data)

    def copy(self) -> "ParamGrid":
        return self.with_data(self.data.copy())

    def _scale_col(self, col):
        if col is None:
            return np.full(self.num_keys, FIXED_LOG_SCALE)
        return self.data[:, col].astype(np.float64)

    @property
    def offsets(self) -> np.ndarray | None:
        lay = self.layout
        return None if lay.offsets is None else self.data[:, lay.offsets]

    def keyset(self) -> KeySet:
        if self.variant is Variant.TRILINEAR:
            raise ConfigError("trilinear grids have no RBF keys")
        lay = self.layout
        d = self.data.astype(np.float64, copy=False)
        base = self.base_keys
        if self.variant is Variant.OFFSET:
            return KeySet(base + d[:, lay.offsets], self._scale_col(lay.log_scale),
                          d[:, lay.coeffs], self.degree)
        keys = base
        ls = self._scale_col(lay.log_scale)
        coeffs = d[:, lay.coeffs]
        if self.variant is Variant.COMBINED:
            keys = np.concatenate([base, base + d[:, lay.offsets]])
            ls = np.concatenate([ls, self._scale_col(lay.log_scale2)])
            coeffs = np.concatenate([coeffs, d[:, lay.coeffs2]])
        return KeySet(np.ascontiguousarray(keys), np.ascontiguousarray(ls),
                      np.ascontiguousarray(coeffs), self.degree)

    def fold_key_grads(self, g_keys, g_log_scale, g_coeffs) -> np.ndarray:
        """Map gradients over the flattened key set back onto the ``(R**3, C)`` layout.

        Base-lattice key gradients are dropped (fixed keys); offset-bank key
        gradients become offset gradients.
        """
        out = np.zeros(self.data.shape, dtype=np.float64)
        lay = self.layout
        n = self.num_keys
        if self.variant is Variant.OFFSET:
            out[:, lay.offsets] = g_keys
        out[:, lay.coeffs] = g_coeffs[:n]
        if lay.log_scale is not None:
            out[:, lay.log_scale] = g_log_scale[:n]
        if self.variant is Variant.COMBINED:
            out[:, lay.offsets] = g_keys[n:]
            out[:, lay.coeffs2] = g_coeffs[n:]
            if lay.log_scale2 is not None:
                out[:, lay.log_scale2] = g_log_scale[n:]
        return out

    def decay_mask(self) -> np.ndarray:
        """Channels subject to weight decay: polynomial coefficients only."""
        mask = np.zeros(self.channels, dtype=bool)
        lay = self.layout
        for s in (lay.coeffs, lay.coeffs2):
            if s is not None:
                mask[s] = True
        return mask

    def group_mask(self, *names: str) -> np.ndarray:
        mask = np.zeros(self.channels, dtype=bool)
        groups = self.layout.groups()
        for name in names:
            for col in groups.get(name, []):
                mask[col] = True
        return mask

    def describe(self) -> str:
        scale = "learnable" if self.learnable_scale else "fixed"
        return (f"{self.variant.name.lower()} deg={degree_name(self.degree)} R={self.resolution} "
                f"C={self.channels} scale={scale} params={self.param_count()}")


@dataclass
class InitSpec:
    seed: int = 0
    const_std: float = 0.1
    log_scale: float = INIT_LOG_SCALE
    dtype: str = "float64"


def init_grid(variant, degree=0, resolution: int = 8, init_spec: InitSpec | None = None,
              learnable_scale: bool = True, rng: np.random.Generator | None = None) -> ParamGrid:
    """Fresh grid: lattice keys, ``log_scale`` at 7, constant terms ~ N(0, std^2), rest zero."""
    spec = init_spec or InitSpec()
    variant = Variant.parse(variant)
    degree = 0 if variant is Variant.TRILINEAR else parse_degree(degree)
    if int(resolution) < 1:
        raise ConfigError(f"resolution must be >= 1, got {resolution}")
    _check_combo(variant, degree)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    n = int(resolution) ** 3
    c = num_channels(variant, degree, learnable_scale)
    data = np.zeros((n, c), dtype=np.float64)
    lay = layout_for(variant, degree, learnable_scale)
    for s in (lay.coeffs, lay.coeffs2):
        if s is not None:
            data[:, s.start] = rng.normal(0.0, spec.const_std, size=n)
    for col in (lay.log_scale, lay.log_scale2):
        if col is not None:
            data[:, col] = spec.log_scale
    return ParamGrid(variant, degree, resolution, data.astype(spec.dtype), learnable_scale)


# -- .efg serialization -------------------------------------------------------


def to_bytes(grid: ParamGrid) -> bytes:
    vbyte = int(grid.variant) | (0 if grid.learnable_scale else _FIXED_SCALE_BIT)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, vbyte, grid.degree, grid.resolution, grid.channels)
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    return header + payload


def from_bytes(buf: bytes, offset: int = 0) -> tuple[ParamGrid, int]:
    """Parse one record starting at ``offset``; returns the grid and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise ConfigError("truncated .efg header")
    magic, version, vbyte, degree, r, c = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ConfigError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported .efg version {version}")
    variant = Variant.parse(vbyte & ~_FIXED_SCALE_BIT)
    learnable = not (vbyte & _FIXED_SCALE_BIT)
    expect = num_channels(variant, degree if variant is not Variant.TRILINEAR else 0, learnable)
    if c != expect:
        raise ConfigError(f"channel count {c} does not match variant ({expect})")
    if r < 1:
        raise ConfigError("resolution must be >= 1")
    start = offset + _HEADER.size
    nbytes = r**3 * c * 4
    if len(buf) - start < nbytes:
        raise ConfigError("truncated .efg payload")
    data = np.frombuffer(buf, dtype="<f4", count=r**3 * c, offset=start).reshape(r**3, c).copy()
    return ParamGrid(variant, degree, r, data, learnable), start + nbytes


def save_grid(grid: ParamGrid, path) -> None:
    Path(path).write_bytes(to_bytes(grid))


def load_grid(path) -> ParamGrid:
    buf = Path(path).read_bytes()
    grid, end = from_bytes(buf)
    if end != len(buf):
        raise ConfigError(f"{len(buf) - end} trailing bytes after .efg record")
    return grid


def save_stack(grids, path) -> None:
    grids = list(grids)
    parts = [_STACK_HEADER.pack(STACK_MAGIC, FORMAT_VERSION, len(grids))]
    parts += [to_bytes(g) for g in grids]
    Path(path).write_bytes(b"".join(parts))


def load_stack(path) -> list[ParamGrid]:
    buf = Path(path).read_bytes()
    if len(buf) < _STACK_HEADER.size:
        raise ConfigError("truncated stack header")
    magic, version, count = _STACK_HEADER.unpack_from(buf, 0)
    if magic != STACK_MAGIC or version != FORMAT_VERSION:
        raise ConfigError("not a grid stack file")
    off = _STACK_HEADER.size
    grids = []
    for _ in range(count):
        g, off = from_bytes(buf, off)
        grids.append(g)
    if off != len(buf):
        raise ConfigError("trailing bytes after stack")
    return grids


__all__ = [
    "CUBE", "FIXED_LOG_SCALE", "INIT_LOG_SCALE", "InitSpec", "KeySet", "Layout", "ParamGrid",
    "Variant", "from_bytes", "init_grid", "lattice", "lattice_axis", "layout_for", "load_grid",
    "load_stack", "num_channels", "param_count", "save_grid", "save_stack", "to_bytes",
]
