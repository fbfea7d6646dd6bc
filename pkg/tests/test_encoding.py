import numpy as np
import pytest

from core.encoding import (ConfigurationError, EncoderSpec, HashEncoder, HashGrid, HashGridConfig, PeConfig,
                           PositionalEncoder, build_encoder, clamp_normalized, clamped_coordinate_count,
                           encode_hash, encode_hash_backward, encode_pe, grid_index, pe_jacobian)


def _single_level(res: int, table_size: int = 2 ** 14, mode: str = "hashed") -> HashGridConfig:
    return HashGridConfig(num_levels=1, base_resolution=res, per_level_scale=1.5, table_size=table_size,
                          feature_dim=2, hashing_mode=mode)


def _random_grid(config: HashGridConfig, seed: int = 3) -> HashGrid:
    grid = HashGrid(config, seed=seed)
    rng = np.random.default_rng(seed)
    for table in grid.tables:
        table[:] = rng.uniform(-0.5, 0.5, size=table.shape)
    return grid


# ==================== PE ====================

def test_pe_at_origin_single_frequency():
    out = encode_pe(np.array([[0.0, 0.0]]), PeConfig(1)).values
    np.testing.assert_allclose(out[0], [0.0, 1.0, 0.0, 1.0], atol=1e-15)


def test_pe_component_then_frequency_order():
    out = encode_pe(np.array([[0.5, -1.0]]), PeConfig(2)).values[0]
    np.testing.assert_allclose(out[:4], [1.0, 0.0, 0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(out[4:], [0.0, -1.0, 0.0, 1.0], atol=1e-12)


def test_pe_output_length():
    feature = encode_pe(np.zeros((5, 2)), PeConfig(10))
    assert feature.values.shape == (5, 40)
    assert feature.provenance == "pe(L=10)"


def test_pe_jacobian_matches_finite_differences():
    cfg = PeConfig(6)
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.9, 0.9, size=(8, 2))
    jac = pe_jacobian(x, cfg)
    h = 1e-6
    for c in range(2):
        step = np.zeros(2)
        step[c] = h
        fd = (encode_pe(x + step, cfg).values - encode_pe(x - step, cfg).values) / (2 * h)
        np.testing.assert_allclose(jac[:, :, c], fd, rtol=1e-6, atol=1e-6)


def test_pe_config_rejects_zero_frequencies():
    with pytest.raises(ConfigurationError):
        PeConfig(0)


# ==================== grid_index ====================

def test_grid_index_dense_row_major():
    cfg = _single_level(2, table_size=16)
    assert not cfg.uses_hash(0)
    assert grid_index(2, 1, 0, cfg) == 5


def test_grid_index_hashed_pinned_value():
    cfg = _single_level(256, table_size=2 ** 14)
    assert cfg.uses_hash(0)
    # (3 XOR 7*2654435761) mod 2^14
    assert grid_index(3, 7, 0, cfg) == 5076
    assert grid_index(5, 9, 0, cfg) == 1852


@pytest.mark.parametrize("mode", ["hashed", "single"])
def test_grid_index_origin_is_zero(mode):
    cfg = HashGridConfig(num_levels=4, base_resolution=64, table_size=2 ** 10, hashing_mode=mode)
    for level in range(cfg.effective_levels):
        assert grid_index(0, 0, level, cfg) == 0


def test_grid_index_vectorized_matches_scalar():
    cfg = _single_level(256)
    ix = np.array([0, 3, 5, 256])
    iy = np.array([0, 7, 9, 256])
    vec = grid_index(ix, iy, 0, cfg)
    assert vec.tolist() == [grid_index(int(a), int(b), 0, cfg) for a, b in zip(ix, iy)]


def test_grid_index_rejects_out_of_range_corner():
    with pytest.raises(ValueError):
        grid_index(3, 0, 0, _single_level(2, table_size=16))


def test_dense_mode_requires_table_to_fit():
    with pytest.raises(ConfigurationError):
        HashGridConfig(num_levels=2, base_resolution=16, per_level_scale=2.0, table_size=2 ** 8,
                       hashing_mode="dense")
    ok = HashGridConfig(num_levels=2, base_resolution=4, per_level_scale=2.0, table_size=2 ** 8, hashing_mode="dense")
    assert [ok.level_table_size(level) for level in range(2)] == [25, 81]


def test_level_table_size_is_capped_by_table_size(toy_hash_config):
    sizes = [toy_hash_config.level_table_size(level) for level in range(3)]
    assert sizes == [25, 81, 256]


def test_single_mode_uses_finest_level():
    cfg = HashGridConfig(num_levels=5, base_resolution=16, per_level_scale=2.0, table_size=2 ** 12,
                         hashing_mode="single")
    assert cfg.effective_levels == 1
    assert cfg.resolution(0) == 256
    assert cfg.output_dim == cfg.feature_dim


def test_unknown_hash_mode_rejected():
    with pytest.raises(ConfigurationError):
        HashGridConfig(hashing_mode="sparse")


# ==================== encode_hash ====================

def test_hash_output_length_is_levels_times_features():
    cfg = HashGridConfig(num_levels=16, feature_dim=2, table_size=2 ** 10)
    assert cfg.output_dim == 32
    feature = encode_hash(np.zeros((3, 2)), HashGrid(cfg))
    assert feature.values.shape == (3, 32)


def test_hash_on_corner_returns_corner_feature():
    cfg = _single_level(4, table_size=64)
    grid = _random_grid(cfg)
    feature = encode_hash(np.array([[-0.5, 0.5]]), grid)
    corner = grid.tables[0][grid_index(1, 3, 0, cfg)]
    np.testing.assert_array_equal(feature.values[0], corner)
    np.testing.assert_array_equal(feature.record.weights[0][0], [1.0, 0.0, 0.0, 0.0])


def test_hash_at_upper_boundary_returns_last_corner():
    cfg = _single_level(4, table_size=64)
    grid = _random_grid(cfg)
    feature = encode_hash(np.array([[1.0, 1.0]]), grid)
    np.testing.assert_allclose(feature.values[0], grid.tables[0][grid_index(4, 4, 0, cfg)], atol=1e-15)


def test_hash_at_cell_center_is_corner_mean():
    cfg = _single_level(4, table_size=64)
    grid = _random_grid(cfg)
    feature = encode_hash(np.array([[-0.25, 0.25]]), grid)
    corners = [grid_index(ix, iy, 0, cfg) for ix, iy in ((1, 2), (2, 2), (1, 3), (2, 3))]
    np.testing.assert_allclose(feature.values[0], grid.tables[0][corners].mean(axis=0), atol=1e-15)


def test_bilinear_weights_sum_to_one(toy_hash_config):
    x = np.random.default_rng(1).uniform(-1, 1, size=(200, 2))
    record = encode_hash(x, HashGrid(toy_hash_config)).record
    for weights in record.weights:
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)


def test_hash_is_continuous_across_cell_edges(toy_hash_config):
    grid = _random_grid(toy_hash_config)
    edge = -1.0 + 2.0 * 3 / 16
    eps = 1e-9
    left = encode_hash(np.array([[edge - eps, 0.1]]), grid).values
    right = encode_hash(np.array([[edge + eps, 0.1]]), grid).values
    assert np.abs(left - right).max() < 1e-6


# ==================== encode_hash_backward ====================

def test_backward_corner_point_hits_single_entry():
    cfg = _single_level(4, table_size=64)
    grid = _random_grid(cfg)
    feature = encode_hash(np.array([[-0.5, 0.5]]), grid)
    g = np.array([[0.3, -0.7]])
    encode_hash_backward(g, feature.record, grid)
    index = grid_index(1, 3, 0, cfg)
    np.testing.assert_allclose(grid.grads[0][index], g[0])
    assert np.count_nonzero(grid.grads[0]) == 2


def test_backward_cell_center_splits_evenly():
    cfg = _single_level(4, table_size=64)
    grid = _random_grid(cfg)
    feature = encode_hash(np.array([[-0.25, 0.25]]), grid)
    g = np.array([[1.0, 2.0]])
    encode_hash_backward(g, feature.record, grid)
    for ix, iy in ((1, 2), (2, 2), (1, 3), (2, 3)):
        np.testing.assert_allclose(grid.grads[0][grid_index(ix, iy, 0, cfg)], 0.25 * g[0])


def test_backward_rejects_shape_mismatch(toy_hash_config):
    grid = HashGrid(toy_hash_config)
    feature = encode_hash(np.zeros((2, 2)), grid)
    with pytest.raises(ValueError):
        encode_hash_backward(np.zeros((3, toy_hash_config.output_dim)), feature.record, grid)


def test_table_gradient_matches_finite_differences(toy_hash_config):
    grid = _random_grid(toy_hash_config)
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, size=(32, 2))
    target = rng.normal(size=(32, toy_hash_config.output_dim))

    def loss() -> float:
        return 0.5 * float(np.sum((encode_hash(x, grid).values - target) ** 2))

    feature = encode_hash(x, grid)
    encode_hash_backward(feature.values - target, feature.record, grid)

    h = 1e-4
    for level, table in enumerate(grid.tables):
        touched = np.unique(feature.record.indices[level])
        for index in touched[:10]:
            for k in range(table.shape[1]):
                original = table[index, k]
                table[index, k] = original + h
                up = loss()
                table[index, k] = original - h
                down = loss()
                table[index, k] = original
                fd = (up - down) / (2 * h)
                np.testing.assert_allclose(grid.grads[level][index, k], fd, rtol=1e-4, atol=1e-7)


# ==================== 裁剪与封装 ====================

def test_clamping_counts_out_of_range_rows():
    before = clamped_coordinate_count()
    out = clamp_normalized(np.array([[1.5, 0.0], [0.0, 0.0], [-2.0, -3.0]]))
    assert clamped_coordinate_count() - before == 2
    assert out.min() == -1.0 and out.max() == 1.0


def test_build_encoder_dispatches_on_kind(toy_hash_config):
    pe = build_encoder(EncoderSpec(kind="pe", pe=PeConfig(3)))
    assert isinstance(pe, PositionalEncoder) and pe.output_dim == 12 and pe.parameters() == {}
    hashed = build_encoder(EncoderSpec(kind="hash", hash_grid=toy_hash_config))
    assert isinstance(hashed, HashEncoder)
    assert sorted(hashed.parameters()) == ["level0", "level1", "level2"]


def test_encoder_spec_dict_round_trip(toy_hash_config):
    spec = EncoderSpec(kind="hash", pe=PeConfig(7), hash_grid=toy_hash_config)
    assert EncoderSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigurationError):
        EncoderSpec(kind="fourier")
