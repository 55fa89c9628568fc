import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyfield.errors import ConfigError
from polyfield.grid import (
    INIT_LOG_SCALE, InitSpec, ParamGrid, Variant, from_bytes, init_grid, lattice, load_grid,
    load_stack, num_channels, param_count, save_grid, save_stack, to_bytes,
)
from polyfield.poly import CUBE

from conftest import random_grid

# (config, variant, degree, resolution, learnable scale, total) for every
# "Total Params" entry of the ablation table
TABLE_ROWS = [
    ("PC-1", "offset", 0, 32, True, 163_840),
    ("PC-2", "offset", 1, 32, True, 262_144),
    ("PC-3", "offset", 0, 32, True, 163_840),
    ("PC-4", "offset", 1, 32, True, 262_144),
    ("G-1", "func", 0, 32, False, 32_768),
    ("G-2", "func", 1, 32, False, 131_072),
    ("G-3", "func", 2, 32, False, 327_680),
    ("G-4", "func", 3, 32, False, 655_360),
    ("G-5", "func", 0, 32, True, 65_536),
    ("G-6", "func", 1, 32, True, 163_840),
    ("G-7", "func", 2, 32, True, 360_448),
    ("G-8", "func", 3, 32, True, 688_128),
    ("Full-1", "offset", 1, 32, True, 262_144),
    ("Full-2", "offset", 1, 64, True, 2_097_152),
    ("Full-3", "combined", 1, 32, True, 425_984),
    ("Full-4", "combined", 1, 32, True, 425_984),
]


class TestParamCount:
    @pytest.mark.parametrize("row", TABLE_ROWS, ids=[r[0] for r in TABLE_ROWS])
    def test_table_totals(self, row):
        _, variant, degree, r, learnable, total = row
        assert param_count(variant, degree, r, learnable) == total

    def test_nrbf_single_key(self):
        assert param_count("nrbf", 0, 1) == 2

    @pytest.mark.parametrize("variant,degree,channels", [
        ("func", 2, 11), ("combined", 1, 13), ("offset", 1, 8), ("trilinear", 0, 1),
        ("combined", CUBE, 21),
    ])
    def test_channels(self, variant, degree, channels):
        assert num_channels(variant, degree) == channels

    def test_matches_stored_array(self, rng):
        for variant in ("nrbf", "func", "offset", "combined", "trilinear"):
            g = init_grid(variant, 0, 3, rng=rng)
            assert g.param_count() == g.data.size == param_count(variant, 0, 3)

    def test_nrbf_rejects_polynomial_degree(self):
        with pytest.raises(ConfigError):
            num_channels("nrbf", 1)


class TestInitGrid:
    def test_r2_corners(self):
        g = init_grid("func", 1, 2)
        corners = {tuple(k) for k in g.base_keys}
        assert corners == {(x, y, z) for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)}

    def test_lattice_spans_domain(self):
        k = lattice(5)
        np.testing.assert_array_equal(np.unique(k[:, 0]), [-1.0, -0.5, 0.0, 0.5, 1.0])

    @pytest.mark.parametrize("variant", ["nrbf", "func", "offset", "combined"])
    def test_initial_scale(self, variant):
        ks = init_grid(variant, 0, 3).keyset()
        np.testing.assert_allclose(ks.beta, np.exp(7.0))
        assert INIT_LOG_SCALE == 7.0
        np.testing.assert_allclose(1.0 / ks.beta, 0.000912, rtol=1e-3)

    def test_offsets_start_at_zero(self):
        g = init_grid("combined", 1, 3)
        np.testing.assert_array_equal(g.offsets, 0.0)

    def test_higher_coefficients_zero(self):
        g = init_grid("func", 2, 4, InitSpec(const_std=0.1))
        assert np.all(g.data[:, 1:10] == 0.0)
        assert 0.05 < g.data[:, 0].std() < 0.15

    def test_deterministic(self):
        a = init_grid("combined", 1, 4, InitSpec(seed=3))
        b = init_grid("combined", 1, 4, InitSpec(seed=3))
        assert a.data.tobytes() == b.data.tobytes()

    def test_zero_resolution_rejected(self):
        with pytest.raises(ConfigError):
            init_grid("func", 1, 0)

    def test_fixed_scale_not_stored(self):
        g = init_grid("func", 1, 2, learnable_scale=False)
        assert g.channels == 4
        np.testing.assert_allclose(g.keyset().beta, np.exp(7.0))


class TestKeySet:
    def test_combined_has_two_banks(self, rng):
        g = random_grid("combined", 1, 3, rng)
        ks = g.keyset()
        assert len(ks) == 2 * g.num_keys
        np.testing.assert_array_equal(ks.keys[:g.num_keys], g.base_keys)
        np.testing.assert_allclose(ks.keys[g.num_keys:], g.base_keys + g.offsets)

    def test_fold_roundtrip_layout(self, rng):
        g = random_grid("combined", 2, 2, rng)
        n = g.num_keys
        gk = rng.normal(size=(2 * n, 3))
        gb = rng.normal(size=2 * n)
        gc = rng.normal(size=(2 * n, 10))
        out = g.fold_key_grads(gk, gb, gc)
        lay = g.layout
        np.testing.assert_array_equal(out[:, lay.offsets], gk[n:])
        np.testing.assert_array_equal(out[:, lay.coeffs2], gc[n:])
        np.testing.assert_array_equal(out[:, lay.log_scale], gb[:n])

    def test_decay_mask_covers_coefficients_only(self):
        g = init_grid("combined", 1, 2)
        mask = g.decay_mask()
        assert mask.sum() == 8
        assert not mask[g.layout.log_scale] and not mask[g.layout.offsets].any()


class TestSerialization:
    @settings(max_examples=30, deadline=None)
    @given(variant=st.sampled_from(["trilinear", "nrbf", "func", "offset", "combined"]),
           degree=st.sampled_from([0, 1, 2, 3, CUBE]), r=st.integers(1, 4),
           learnable=st.booleans(), seed=st.integers(0, 1000))
    def test_roundtrip_bit_exact(self, variant, degree, r, learnable, seed):
        if variant in ("nrbf", "trilinear"):
            degree = 0
        g = init_grid(variant, degree, r, learnable_scale=learnable, rng=np.random.default_rng(seed))
        g = g.with_data(np.random.default_rng(seed).normal(size=g.data.shape).astype(np.float32))
        back, end = from_bytes(to_bytes(g))
        assert end == len(to_bytes(g))
        assert back.variant == g.variant and back.degree == g.degree
        assert back.learnable_scale == learnable
        assert back.data.tobytes() == g.data.tobytes()

    def test_header_layout(self):
        g = init_grid("combined", 1, 2)
        buf = to_bytes(g)
        assert buf[:4] == b"EFGR"
        assert int.from_bytes(buf[4:8], "little") == 1
        assert buf[8] == int(Variant.COMBINED) and buf[9] == 1
        assert int.from_bytes(buf[10:14], "little") == 2
        assert int.from_bytes(buf[14:18], "little") == 13
        assert len(buf) == 18 + 8 * 13 * 4

    def test_file_roundtrip(self, tmp_path, rng):
        g = random_grid("offset", 1, 3, rng)
        save_grid(g, tmp_path / "g.efg")
        back = load_grid(tmp_path / "g.efg")
        np.testing.assert_array_equal(back.data, g.data.astype(np.float32))

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
        lambda b: b[:10],
    ])
    def test_corrupt_rejected(self, tmp_path, mutate):
        p = tmp_path / "bad.efg"
        p.write_bytes(mutate(to_bytes(init_grid("func", 1, 2))))
        with pytest.raises(ConfigError):
            load_grid(p)

    def test_stack_roundtrip(self, tmp_path, rng):
        grids = [random_grid("func", 1, 2, rng) for _ in range(3)]
        save_stack(grids, tmp_path / "s.efs")
        back = load_stack(tmp_path / "s.efs")
        assert len(back) == 3
        for a, b in zip(grids, back):
            np.testing.assert_array_equal(b.data, a.data.astype(np.float32))

    def test_wrong_shape_rejected(self):
        with pytest.raises(ConfigError):
            ParamGrid("func", 1, 2, np.zeros((8, 4)))
