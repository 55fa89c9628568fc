import numpy as np
import pytest

from polyfield.composition import (
    CosineStack, cosine_eval, cosine_fit, cosine_weights, partial_sums, splice_grids, splice_mask,
)
from polyfield.engine import forward_naive, forward_streaming
from polyfield.errors import ConfigError
from polyfield.geometry import Sphere
from polyfield.grid import init_grid, param_count, to_bytes
from polyfield.trainer import GridConfig, TrainConfig, fit

from conftest import random_grid


def stack(rng, bands=3, variant="func", degree=1, r=3):
    return CosineStack([random_grid(variant, degree, r, rng) for _ in range(bands + 1)])


class TestCosineEval:
    def test_single_band_is_plain_forward(self, rng):
        s = stack(rng, bands=0)
        q = rng.uniform(-1, 1, (100, 3))
        assert cosine_eval(s, q).tobytes() == forward_streaming(s.bands[0], q).outputs.tobytes()

    def test_origin_sums_bands(self, rng):
        s = stack(rng, bands=3)
        o = [forward_naive(g, [[0, 0, 0]]).outputs[0] for g in s.bands]
        np.testing.assert_allclose(cosine_eval(s, [[0, 0, 0]]), sum(o), rtol=1e-12)

    def test_direct_summation(self, rng):
        s = stack(rng, bands=2, variant="combined")
        q = rng.uniform(-1, 1, (30, 3))
        expected = np.zeros(30)
        for b, g in enumerate(s.bands):
            w = np.cos(b * np.pi * q[:, 0]) * np.cos(b * np.pi * q[:, 1]) * np.cos(b * np.pi * q[:, 2])
            expected += w * forward_naive(g, q).outputs
        np.testing.assert_allclose(cosine_eval(s, q), expected, rtol=1e-12, atol=1e-14)

    def test_weights(self, rng):
        q = rng.uniform(-1, 1, (10, 3))
        w = cosine_weights(q, 2)
        np.testing.assert_array_equal(w[:, 0], 1.0)
        np.testing.assert_allclose(w[:, 2], np.prod(np.cos(2 * np.pi * q), axis=1))

    def test_linear_in_band_constants(self, rng):
        s = stack(rng, bands=2, degree=0)
        q = rng.uniform(-1, 1, (20, 3))
        w = cosine_weights(q, 2)
        base = cosine_eval(s, q)
        alpha = 2.5
        g = s.bands[1]
        data = g.data.copy()
        data[:, 0] *= alpha
        scaled = CosineStack([s.bands[0], g.with_data(data), s.bands[2]])
        contribution = w[:, 1] * forward_streaming(g, q).outputs
        np.testing.assert_allclose(cosine_eval(scaled, q) - base, (alpha - 1) * contribution,
                                   rtol=1e-11, atol=1e-14)

    def test_partial_sums(self, rng):
        s = stack(rng, bands=3)
        q = rng.uniform(-1, 1, (15, 3))
        p = partial_sums(s, q)
        assert p.shape == (4, 15)
        np.testing.assert_allclose(p[-1], cosine_eval(s, q), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(p[0], forward_streaming(s.bands[0], q).outputs, rtol=1e-14)

    def test_parameter_count(self, rng):
        s = CosineStack([init_grid("func", 1, 16) for _ in range(4)])
        assert s.num_bands == 3
        assert param_count("func", 1, 16) == 20480
        assert s.param_count() == 4 * 20480

    def test_empty_and_mixed_rejected(self, rng):
        with pytest.raises(ConfigError):
            CosineStack([])
        with pytest.raises(ConfigError):
            CosineStack([init_grid("func", 1, 2), init_grid("func", 1, 3)])

    def test_save_load(self, tmp_path, rng):
        s = stack(rng, bands=2)
        s.save(tmp_path / "s.efs")
        back = CosineStack.load(tmp_path / "s.efs")
        assert back.num_bands == 2


class TestCosineFit:
    def test_zero_bands_equals_plain_fit(self):
        gcfg = GridConfig("func", 1, 4)
        cfg = TrainConfig(batch_volume=256, batch_near=256, iterations=20, log_every=1, seed=4)
        plain = fit(Sphere(0.5), gcfg, cfg)
        s, res = cosine_fit(Sphere(0.5), 0, gcfg, cfg)
        np.testing.assert_array_equal(res.history, plain.history)
        assert s.bands[0].data.tobytes() == plain.grid.data.tobytes()

    def test_higher_bands_start_at_zero(self):
        gcfg = GridConfig("func", 1, 3)
        cfg = TrainConfig(batch_volume=64, batch_near=64, iterations=0)
        s, _ = cosine_fit(Sphere(0.5), 2, gcfg, cfg)
        for g in s.bands[1:]:
            np.testing.assert_array_equal(g.data[:, g.decay_mask()], 0.0)

    def test_negative_bands(self):
        with pytest.raises(ConfigError):
            cosine_fit(Sphere(0.5), -1)


class TestSplice:
    def test_self_identity(self, rng):
        a = random_grid("combined", 1, 4, rng)
        assert to_bytes(splice_grids(a, a, axis=1, threshold=0.2)) == to_bytes(a)

    def test_complementary_partition(self, rng):
        a = random_grid("combined", 1, 4, rng)
        b = random_grid("combined", 1, 4, rng)
        ab = splice_grids(a, b, axis=2, threshold=0.1)
        ba = splice_grids(b, a, axis=2, threshold=0.1)
        side = splice_mask(a, 2, 0.1)
        assert 0 < side.sum() < a.num_keys
        np.testing.assert_array_equal(ab.data[side], a.data[side])
        np.testing.assert_array_equal(ab.data[~side], b.data[~side])
        np.testing.assert_array_equal(ba.data[side], b.data[side])
        np.testing.assert_array_equal(ba.data[~side], a.data[~side])

    def test_header_and_count_preserved(self, rng):
        a = random_grid("offset", 2, 3, rng)
        b = random_grid("offset", 2, 3, rng)
        out = splice_grids(a, b)
        assert to_bytes(out)[:18] == to_bytes(a)[:18]
        assert out.param_count() == a.param_count()

    @pytest.mark.parametrize("other", [("func", 1, 3), ("combined", 1, 4), ("combined", 2, 3)])
    def test_mismatch(self, rng, other):
        with pytest.raises(ConfigError):
            splice_grids(random_grid("combined", 1, 3, rng), random_grid(*other, rng))

    def test_bad_axis(self, rng):
        a = random_grid("func", 1, 2, rng)
        with pytest.raises(ConfigError):
            splice_grids(a, a, axis=3)
