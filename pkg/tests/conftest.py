import numpy as np
import pytest

from polyfield.grid import ParamGrid, Variant, init_grid
from polyfield.poly import CUBE

VARIANTS = ("nrbf", "func", "offset", "combined")
DEGREES = (0, 1, 2, 3, CUBE)


def random_grid(variant, degree, resolution, rng, log_scale=(0.5, 2.5), offset_std=0.2,
                coeff_std=0.5, learnable_scale=True) -> ParamGrid:
    """Grid with every channel randomized so that all terms interact.

    Small scales keep the softmax weights spread over many keys, which is
    what the equivalence and gradient checks need to be meaningful.
    """
    g = init_grid(variant, degree, resolution, learnable_scale=learnable_scale, rng=rng)
    data = g.data.copy()
    lay = g.layout
    for s in (lay.coeffs, lay.coeffs2):
        if s is not None:
            data[:, s] = rng.normal(0.0, coeff_std, (g.num_keys, s.stop - s.start))
    for col in (lay.log_scale, lay.log_scale2):
        if col is not None:
            data[:, col] = rng.uniform(*log_scale, g.num_keys)
    if lay.offsets is not None:
        data[:, lay.offsets] = rng.normal(0.0, offset_std, (g.num_keys, 3))
    return g.with_data(data)


def valid_degrees(variant):
    return (0,) if Variant.parse(variant) is Variant.NRBF else DEGREES


def rel_err(actual, expected) -> float:
    """Max error relative to the larger of each entry's magnitude and the array's scale.

    Entries that are tiny compared to the rest of the array are judged on
    the array scale instead of their own magnitude, where finite
    differences carry only absolute accuracy.
    """
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(expected, dtype=np.float64)
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), scale)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
