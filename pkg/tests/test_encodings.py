import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from residual_nerf import autodiff as ad
from residual_nerf.encodings import (FreqEncodingConfig, HashGridConfig, freq_encode, hash_encode,
                                     hash_encode_reference, init_table, locate, spatial_hash)

UNIT_BOX = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def small_grid(**kw):
    d = dict(levels=3, features_per_level=2, base_resolution=4, per_level_scale=2.0,
             table_size=2 ** 8, bounds=UNIT_BOX)
    d.update(kw)
    return HashGridConfig(**d)


def random_table(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return ad.Tensor(rng.normal(size=(cfg.levels * cfg.table_size, cfg.features_per_level)),
                     requires_grad=True)


class TestHashGridConfig:
    def test_defaults(self):
        cfg = HashGridConfig()
        assert (cfg.levels, cfg.features_per_level, cfg.base_resolution) == (8, 2, 16)
        assert cfg.per_level_scale == 1.5 and cfg.table_size == 2 ** 14
        assert cfg.output_dim == 16

    def test_resolution_formula(self):
        cfg = HashGridConfig()
        assert list(cfg.resolutions()) == [int(np.floor(16 * 1.5 ** l)) for l in range(8)]

    def test_default_table_under_one_megabyte(self):
        cfg = HashGridConfig()
        assert init_table(cfg, np.random.default_rng(0)).nbytes <= 2 ** 20

    @pytest.mark.parametrize("kw", [dict(table_size=1000), dict(levels=0),
                                    dict(features_per_level=0), dict(per_level_scale=1.0),
                                    dict(bounds=((0, 0, 0), (1, 0, 1)))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            HashGridConfig(**kw)

    def test_dict_round_trip(self):
        cfg = small_grid()
        assert HashGridConfig.from_dict(cfg.to_dict()) == cfg

    def test_table_init_range(self):
        t = init_table(HashGridConfig(), np.random.default_rng(1))
        assert t.dtype == np.float32 and np.abs(t).max() <= 1e-4


class TestHashEncode:
    def test_on_vertex_returns_vertex_features(self):
        cfg = small_grid()
        table = random_table(cfg)
        pos = np.array([0.25, 0.5, 0.75])  # a vertex of every level (res 4, 8, 16)
        out = hash_encode(pos, cfg, table).data
        loc = locate(pos[None], cfg)
        for l in range(cfg.levels):
            corner = np.argmax(loc.weights[0, l])
            assert loc.weights[0, l, corner] == pytest.approx(1.0)
            np.testing.assert_allclose(out[2 * l:2 * l + 2], table.data[loc.rows[0, l, corner]],
                                       rtol=1e-6)

    def test_cell_centre_is_corner_mean(self):
        cfg = small_grid(levels=1)
        table = random_table(cfg)
        pos = np.array([1.5, 2.5, 0.5]) / 4
        out = hash_encode(pos, cfg, table).data
        loc = locate(pos[None], cfg)
        np.testing.assert_allclose(loc.weights[0, 0], np.full(8, 1 / 8), rtol=1e-6)
        np.testing.assert_allclose(out, table.data[loc.rows[0, 0]].mean(axis=0), rtol=1e-5)

    def test_dense_levels_index_directly(self):
        cfg = small_grid(levels=1, base_resolution=4, table_size=2 ** 8)  # 5^3 = 125 <= 256
        assert cfg.is_dense(0)
        loc = locate(np.array([[0.0, 0.0, 0.0]]), cfg)
        assert loc.rows[0, 0, 0] == 0
        loc = locate(np.array([[1.0, 1.0, 1.0]]), cfg)
        assert loc.rows[0, 0].max() == 124

    def test_hashed_levels_use_xor_of_primes(self):
        cfg = small_grid(levels=1, base_resolution=16, table_size=2 ** 6)
        assert not cfg.is_dense(0)
        pos = np.array([[3.0, 5.0, 7.0]]) / 16
        loc = locate(pos, cfg)
        expected = ((3 * 1) ^ (5 * 2654435761) ^ (7 * 805459861)) & (2 ** 6 - 1)
        assert loc.rows[0, 0, 0] == expected

    def test_spatial_hash_is_pure(self):
        c = np.array([[1, 2, 3], [1, 2, 3], [7, 0, 9]])
        h = spatial_hash(c, 2 ** 14)
        assert h[0] == h[1] and 0 <= h.min() and h.max() < 2 ** 14

    def test_level_offsets_keep_levels_apart(self):
        cfg = small_grid()
        loc = locate(np.random.default_rng(0).random((50, 3)), cfg)
        for l in range(cfg.levels):
            assert (loc.rows[:, l] // cfg.table_size == l).all()

    def test_matches_reference_implementation(self):
        cfg = small_grid(table_size=2 ** 6)
        table = random_table(cfg)
        pos = np.random.default_rng(4).random((40, 3))
        np.testing.assert_allclose(hash_encode(pos, cfg, table).data,
                                   hash_encode_reference(pos, cfg, table).data, rtol=1e-5,
                                   atol=1e-6)

    def test_gradient_matches_reference(self):
        cfg = small_grid(table_size=2 ** 6)
        pos = np.random.default_rng(4).random((40, 3))
        w = ad.Tensor(np.random.default_rng(5).normal(size=(40, cfg.output_dim)))
        grads = []
        for enc in (hash_encode, hash_encode_reference):
            table = random_table(cfg)
            ad.backward(ad.sum_reduce(ad.multiply(enc(pos, cfg, table), w)))
            grads.append(table.grad)
        np.testing.assert_allclose(grads[0], grads[1], rtol=1e-5, atol=1e-6)

    def test_corner_gradients_are_trilinear_weights(self):
        cfg = small_grid(levels=1, features_per_level=1)
        table = random_table(cfg)
        pos = np.array([0.3, 0.6, 0.1])
        ad.backward(ad.sum_reduce(hash_encode(pos, cfg, table)))
        loc = locate(pos[None], cfg)
        np.testing.assert_allclose(table.grad[loc.rows[0, 0], 0], loc.weights[0, 0], rtol=1e-6)
        assert np.count_nonzero(table.grad) <= 8

    def test_grad_check_32bit(self):
        cfg = small_grid(table_size=2 ** 6)
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(10):
            pos = rng.random((3, 3))
            w = ad.Tensor(rng.normal(size=(3, cfg.output_dim)))
            table = ad.Tensor(rng.normal(size=(cfg.levels * cfg.table_size, 2)).astype(np.float32))
            loc = locate(pos, cfg)
            touched = np.unique(loc.rows)
            worst = max(worst, ad.grad_check(
                lambda t: ad.sum_reduce(ad.multiply(hash_encode(pos, cfg, t), w)), table,
                step=1e-2, coords=(touched[:, None] * 2 + np.arange(2)).reshape(-1)[:40]))
        assert worst < 1e-3

    def test_positions_clamped_to_box(self):
        cfg = small_grid()
        table = random_table(cfg)
        inside = hash_encode(np.array([1.0, 1.0, 0.0]), cfg, table).data
        outside = hash_encode(np.array([3.0, 1.5, -2.0]), cfg, table).data
        np.testing.assert_array_equal(inside, outside)

    def test_world_bounds_normalisation(self):
        cfg = small_grid(bounds=((-2.0, -2.0, -2.0), (2.0, 2.0, 2.0)))
        unit = small_grid()
        t = random_table(cfg)
        np.testing.assert_allclose(hash_encode(np.array([0.0, 1.0, -1.0]), cfg, t).data,
                                   hash_encode(np.array([0.5, 0.75, 0.25]), unit, t).data)

    def test_non_finite_position(self):
        with pytest.raises(ad.NumericError):
            hash_encode(np.array([np.nan, 0.0, 0.0]), small_grid(), random_table(small_grid()))

    def test_nearby_queries_are_close(self):
        cfg = small_grid()
        table = random_table(cfg)
        a = hash_encode(np.array([0.31, 0.42, 0.53]), cfg, table).data
        b = hash_encode(np.array([0.31, 0.42, 0.53 + 1e-6]), cfg, table).data
        assert np.abs(a - b).max() < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_trilinear_weights_are_a_partition_of_unity(p):
    loc = locate(np.array([p]), HashGridConfig(bounds=UNIT_BOX))
    assert (loc.weights >= 0).all()
    np.testing.assert_allclose(loc.weights.sum(axis=-1), 1.0, atol=1e-5)


class TestFreqEncode:
    def test_hand_example(self):
        out = freq_encode(np.array([0.0, 0.0, 1.0]), FreqEncodingConfig(1, include_input=False))
        np.testing.assert_allclose(out, [0, 1, 0, 1, 0.8415, 0.5403], atol=1e-4)

    def test_parity(self):
        cfg = FreqEncodingConfig(3, include_input=False)
        a = freq_encode(np.array([1.0, 0.0, 0.0]), cfg).reshape(-1, 3, 2)
        b = freq_encode(np.array([-1.0, 0.0, 0.0]), cfg).reshape(-1, 3, 2)
        np.testing.assert_allclose(a[..., 1], b[..., 1])
        np.testing.assert_allclose(a[..., 0], -b[..., 0])

    def test_zero_frequencies_is_identity(self):
        v = np.array([0.6, 0.0, 0.8])
        np.testing.assert_allclose(freq_encode(v, FreqEncodingConfig(0, True)), v, rtol=1e-6)

    def test_output_dim(self):
        cfg = FreqEncodingConfig(4, True)
        assert freq_encode(np.eye(3), cfg).shape == (3, cfg.output_dim) == (3, 27)

    def test_negative_frequencies_rejected(self):
        with pytest.raises(ValueError):
            FreqEncodingConfig(-1)
