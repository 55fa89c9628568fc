import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyfield.engine import (
    forward_naive, forward_streaming, forward_trilinear, nrbf_formula, query_gradient,
    query_gradient_naive, track_workspace,
)
from polyfield.errors import ConfigError
from polyfield.grid import KeySet, init_grid
from polyfield.poly import CUBE

from conftest import random_grid, rel_err, valid_degrees

DATA = Path(__file__).parent / "data"


def keyset(keys, log_scale, coeffs, degree=0):
    return KeySet(np.asarray(keys, float).reshape(-1, 3), np.asarray(log_scale, float).ravel(),
                  np.asarray(coeffs, float).reshape(len(np.atleast_1d(log_scale)), -1), degree)


class TestForward:
    def test_single_key_constant(self, rng):
        ks = keyset([[0.2, -0.1, 0.4]], [3.0], [[1.7]])
        q = rng.uniform(-1, 1, (20, 3))
        for fn in (forward_naive, forward_streaming):
            np.testing.assert_allclose(fn(ks, q).outputs, 1.7, rtol=1e-15)

    def test_equal_constants(self, rng):
        ks = keyset(rng.uniform(-1, 1, (30, 3)), rng.uniform(0, 4, 30), np.full((30, 1), -0.4))
        out = forward_streaming(ks, rng.uniform(-1, 1, (50, 3))).outputs
        np.testing.assert_allclose(out, -0.4, rtol=1e-14)

    def test_golden_values(self):
        gold = json.loads((DATA / "forward_golden.json").read_text())
        ks = keyset(gold["keys"], gold["log_scale"], gold["coeffs"], gold["degree"])
        for fn in (forward_naive, forward_streaming):
            np.testing.assert_allclose(fn(ks, gold["queries"]).outputs, gold["outputs"],
                                       rtol=1e-13)

    def test_single_key_denominator(self, rng):
        k = np.array([[0.1, 0.2, -0.3]])
        q = rng.uniform(-1, 1, (10, 3))
        b = forward_streaming(keyset(k, [2.0], [[1.0]]), q)
        np.testing.assert_array_equal(b.denom, 1.0)
        expected = np.exp(-np.exp(2.0) * np.sum((q - k) ** 2, axis=1))
        np.testing.assert_allclose(b.e, expected, rtol=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1),
           variant=st.sampled_from(["nrbf", "func", "offset", "combined"]),
           degree=st.sampled_from([0, 1, 2, 3, CUBE]), r=st.sampled_from([1, 2, 3, 4]),
           j=st.sampled_from([1, 5, 64]))
    def test_streaming_matches_naive(self, seed, variant, degree, r, j):
        rng = np.random.default_rng(seed)
        degree = degree if degree in valid_degrees(variant) else 0
        g = random_grid(variant, degree, r, rng, log_scale=(0.0, 7.0))
        q = rng.uniform(-1.2, 1.2, (j, 3))
        assert rel_err(forward_streaming(g, q).outputs, forward_naive(g, q).outputs) <= 1e-12

    def test_sharp_kernels_match_naive(self, rng):
        # trained grids have scales near exp(7): most terms fall below the cutoff
        g = random_grid("combined", 1, 8, rng, log_scale=(6.0, 8.0), offset_std=0.05)
        q = rng.uniform(-1, 1, (2000, 3))
        assert rel_err(forward_streaming(g, q).outputs, forward_naive(g, q).outputs) <= 1e-12

    def test_workers_bitwise(self, rng):
        g = random_grid("combined", 1, 4, rng, log_scale=(3.0, 7.0))
        q = rng.uniform(-1, 1, (500, 3))
        a = forward_streaming(g, q, workers=1).outputs
        b = forward_streaming(g, q, workers=1).outputs
        assert a.tobytes() == b.tobytes()
        np.testing.assert_allclose(forward_streaming(g, q, workers=3).outputs, a, rtol=1e-13)

    def test_no_cull_matches(self, rng):
        g = random_grid("func", 1, 4, rng, log_scale=(4.0, 7.0))
        q = rng.uniform(-1, 1, (100, 3))
        assert rel_err(forward_streaming(g, q, cull=False).outputs,
                       forward_streaming(g, q).outputs) <= 1e-13

    def test_single_precision_parameters(self, rng):
        g = random_grid("combined", 1, 3, rng)
        g = g.with_data(g.data.astype(np.float32))
        q = rng.uniform(-1, 1, (64, 3))
        assert rel_err(forward_streaming(g, q).outputs, forward_naive(g, q).outputs) <= 1e-5

    def test_denominator_positive_outputs_finite(self, rng):
        g = random_grid("combined", 2, 3, rng, log_scale=(5.0, 9.0))
        b = forward_streaming(g, rng.uniform(-3, 3, (200, 3)))
        # the denominator is stored max-shifted so it never underflows
        assert np.all(b.denom >= 1.0) and np.all(np.isfinite(b.shift))
        assert np.all(np.isfinite(b.outputs))

    def test_far_queries_do_not_underflow(self):
        ks = keyset([[0, 0, 0], [0.1, 0, 0]], [7.0, 7.0], [[1.0], [3.0]])
        out = forward_streaming(ks, [[50.0, 0, 0]]).outputs
        assert np.isfinite(out[0]) and 1.0 <= out[0] <= 3.0

    def test_nan_query_rejected(self):
        with pytest.raises(ConfigError):
            forward_streaming(init_grid("func", 1, 2), [[np.nan, 0, 0]])

    def test_empty_keys_rejected(self):
        ks = KeySet(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 1)), 0)
        for fn in (forward_naive, forward_streaming):
            with pytest.raises(ConfigError):
                fn(ks, [[0, 0, 0]])


class TestProperties:
    def test_weights_sum_to_one(self, rng):
        ks = keyset(rng.uniform(-1, 1, (40, 3)), rng.uniform(0, 5, 40), rng.normal(size=(40, 1)))
        q = rng.uniform(-1, 1, (30, 3))
        b = forward_streaming(ks, q)
        logits = -ks.beta[None] * np.sum((q[:, None] - ks.keys[None]) ** 2, axis=-1)
        w = np.exp(logits - b.shift[:, None]) / b.denom[:, None]
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_degree0_range(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        v = rng.normal(size=(n, 1))
        ks = keyset(rng.uniform(-1, 1, (n, 3)), rng.uniform(0, 8, n), v)
        out = forward_streaming(ks, rng.uniform(-2, 2, (40, 3))).outputs
        assert np.all(out >= v.min() - 1e-12) and np.all(out <= v.max() + 1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), degree=st.sampled_from([0, 1, 2, 3, CUBE]))
    def test_shift_invariance(self, seed, degree):
        rng = np.random.default_rng(seed)
        g = random_grid("combined", degree, 2, rng)
        ks = g.keyset()
        t = rng.uniform(-0.5, 0.5, 3)
        moved = KeySet(ks.keys + t, ks.log_scale, ks.coeffs, ks.degree)
        q = rng.uniform(-1, 1, (25, 3))
        a = forward_streaming(ks, q).outputs
        b = forward_streaming(moved, q + t).outputs
        np.testing.assert_allclose(b, a, rtol=1e-10, atol=1e-10)

    def test_degree0_equals_nrbf(self, rng):
        g = random_grid("func", 0, 4, rng, log_scale=(1.0, 7.0))
        ks = g.keyset()
        q = rng.uniform(-1, 1, (300, 3))
        a = forward_streaming(g, q).outputs
        b = nrbf_formula(ks.keys, ks.log_scale, ks.coeffs[:, 0], q)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.slow
    def test_cost_linear_in_terms(self, rng):
        # without culling every query visits every key
        q = rng.uniform(-1, 1, (4000, 3))
        times = []
        sizes = (6, 8, 10)
        for r in sizes:
            g = random_grid("func", 1, r, rng)
            forward_streaming(g, q[:10], cull=False)
            best = np.inf
            for _ in range(3):
                t = time.perf_counter()
                forward_streaming(g, q, cull=False)
                best = min(best, time.perf_counter() - t)
            times.append(best)
        slope = np.polyfit(np.log([r**3 for r in sizes]), np.log(times), 1)[0]
        assert 0.7 <= slope <= 1.3


class TestWorkspace:
    def test_no_query_key_sized_allocation(self, rng):
        r, j = 32, 16384
        g = init_grid("combined", 1, r, rng=rng)
        q = rng.uniform(-1, 1, (j, 3))
        with track_workspace() as ws:
            forward_streaming(g, q)
        n_keys = 2 * r**3
        assert ws.largest < n_keys * j
        assert ws.bytes() <= 64 * (j + r**3 * g.channels)

    def test_query_scope_independent_of_keys(self, rng):
        q = rng.uniform(-1, 1, (4096, 3))
        per_query = []
        for r in (4, 16):
            with track_workspace() as ws:
                forward_streaming(init_grid("combined", 1, r, rng=rng), q)
            per_query.append(ws.bytes("query"))
        assert per_query[0] == per_query[1]


class TestTrilinear:
    def grid(self, r, rng):
        g = init_grid("trilinear", 0, r)
        return g.with_data(rng.normal(size=g.data.shape))

    def test_node_value(self, rng):
        g = self.grid(4, rng)
        out = forward_trilinear(g, g.base_keys).outputs
        np.testing.assert_allclose(out, g.data[:, 0], rtol=1e-14, atol=1e-15)

    def test_cell_center_is_mean(self, rng):
        g = self.grid(3, rng)
        # cell [0, 1]^3 has corners with indices in {1, 2} per axis
        idx = [(ix * 3 + iy) * 3 + iz for ix in (1, 2) for iy in (1, 2) for iz in (1, 2)]
        out = forward_trilinear(g, [[0.5, 0.5, 0.5]]).outputs
        np.testing.assert_allclose(out, g.data[idx, 0].mean(), rtol=1e-14)

    def test_random_query_closed_form(self, rng):
        g = self.grid(5, rng)
        h = 0.5
        for _ in range(20):
            q = rng.uniform(-1, 1, 3)
            i = np.minimum(np.floor((q + 1) / h).astype(int), 3)
            t = (q - (-1 + i * h)) / h
            c = lambda a, b, d: g.data[((i[0] + a) * 5 + i[1] + b) * 5 + i[2] + d, 0]  # noqa: E731
            x, y, z = t
            expected = (c(0, 0, 0) + (c(1, 0, 0) - c(0, 0, 0)) * x + (c(0, 1, 0) - c(0, 0, 0)) * y
                        + (c(0, 0, 1) - c(0, 0, 0)) * z
                        + (c(1, 1, 0) - c(1, 0, 0) - c(0, 1, 0) + c(0, 0, 0)) * x * y
                        + (c(1, 0, 1) - c(1, 0, 0) - c(0, 0, 1) + c(0, 0, 0)) * x * z
                        + (c(0, 1, 1) - c(0, 1, 0) - c(0, 0, 1) + c(0, 0, 0)) * y * z
                        + (c(1, 1, 1) - c(1, 1, 0) - c(1, 0, 1) - c(0, 1, 1) + c(1, 0, 0)
                           + c(0, 1, 0) + c(0, 0, 1) - c(0, 0, 0)) * x * y * z)
            np.testing.assert_allclose(forward_trilinear(g, q).outputs[0], expected, rtol=1e-12)

    def test_outside_hull_clamped_with_flag(self, rng):
        g = self.grid(3, rng)
        with pytest.warns(UserWarning, match="clamped"):
            b = forward_trilinear(g, [[1.5, 0, 0], [0, 0, 0]])
        np.testing.assert_array_equal(b.clamped, [True, False])
        np.testing.assert_allclose(b.outputs[0], forward_trilinear(g, [[1.0, 0, 0]]).outputs[0])

    def test_wrong_variant_rejected(self):
        with pytest.raises(ConfigError):
            forward_trilinear(init_grid("func", 1, 2), [[0, 0, 0]])


class TestQueryGradient:
    def test_single_constant_key(self, rng):
        ks = keyset([[0.3, 0, 0]], [2.0], [[5.0]])
        g = query_gradient(ks, rng.uniform(-1, 1, (10, 3))).grads
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_mirror_symmetry(self, rng):
        ks = keyset([[-0.3, 0.1, 0.2], [0.3, 0.1, 0.2]], [2.0, 2.0], [[1.0], [1.0]])
        q = np.column_stack([np.zeros(10), rng.uniform(-1, 1, (10, 2))])
        np.testing.assert_allclose(query_gradient(ks, q).grads[:, 0], 0.0, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1),
           variant=st.sampled_from(["nrbf", "func", "offset", "combined"]),
           degree=st.sampled_from([0, 1, 2, 3, CUBE]))
    def test_matches_finite_differences(self, seed, variant, degree):
        rng = np.random.default_rng(seed)
        degree = degree if degree in valid_degrees(variant) else 0
        g = random_grid(variant, degree, 2, rng)
        q = rng.uniform(-1, 1, (6, 3))
        h = 1e-5
        fd = np.stack([(forward_naive(g, q + h * e).outputs - forward_naive(g, q - h * e).outputs)
                       / (2 * h) for e in np.eye(3)], axis=1)
        an = query_gradient(g, q).grads
        assert rel_err(an, fd) <= 1e-5
        np.testing.assert_allclose(an, query_gradient_naive(g, q), rtol=1e-10, atol=1e-12)

    def test_outputs_match_forward(self, rng):
        g = random_grid("combined", 1, 3, rng)
        q = rng.uniform(-1, 1, (40, 3))
        np.testing.assert_allclose(query_gradient(g, q).outputs, forward_streaming(g, q).outputs,
                                   rtol=1e-13)
