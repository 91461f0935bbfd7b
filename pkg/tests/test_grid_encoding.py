import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfnerf.errors import ConfigError
from selfnerf.grid_encoding import (
    HASH_PRIMES,
    FrequencyConfig,
    HashGridConfig,
    HashGridTables,
    VertexBankConfig,
    distance_bin,
    encode,
    encode_backward,
    frequency_encode,
    level_resolutions,
    spatial_hash,
    vertex_bank_lookup,
)

SMALL = HashGridConfig(levels=3, features=2, table_size=2**10, min_res=4, max_res=16)


def hash_oracle(z, primes, T):
    # plain python integers, independent of the uint64 kernel
    h = 0
    for zi, pi in zip(z, primes):
        h ^= zi * pi
    return h % T


def test_level_resolutions_examples():
    assert level_resolutions(HashGridConfig(levels=1, min_res=16, max_res=16)) == [16]
    assert level_resolutions(HashGridConfig(levels=3, min_res=16, max_res=256)) == [16, 64, 256]
    res = level_resolutions(HashGridConfig(levels=6, min_res=16, max_res=512))
    assert res[0] == 16 and res[-1] == 512
    assert all(abs(b / a - 2.0) < 0.1 for a, b in zip(res, res[1:]))


def test_level_resolutions_monotone_default():
    res = level_resolutions(HashGridConfig())
    assert len(res) == 16 and res[0] == 16 and res[-1] == 512
    assert all(b >= a for a, b in zip(res, res[1:]))


@pytest.mark.parametrize("kwargs", [
    dict(levels=1, min_res=16, max_res=32),
    dict(levels=2, min_res=16, max_res=16),
    dict(levels=0),
    dict(max_res=8, min_res=16),
])
def test_bad_config(kwargs):
    with pytest.raises(ConfigError):
        HashGridConfig(**kwargs)


def test_spatial_hash_examples():
    cfg = HashGridConfig(table_size=2**14)
    assert spatial_hash((0, 0, 0, 0), cfg) == 0
    assert spatial_hash((1, 0, 0, 0), cfg) == 1
    assert spatial_hash((1, 1, 0, 0), cfg) == (1 ^ 2654435761) % 2**14


@given(st.lists(st.integers(0, 600), min_size=4, max_size=4), st.integers(1, 5000))
def test_spatial_hash_matches_formula(z, T):
    cfg = HashGridConfig(table_size=T)
    assert spatial_hash(z, cfg) == hash_oracle(z, HASH_PRIMES, T)


def test_vertex_exactness_1000_vertices():
    cfg = HashGridConfig(levels=4, features=2, table_size=2**12, min_res=8, max_res=64)
    tables = HashGridTables.init(cfg, seed=3, scale=1.0)
    rng = np.random.default_rng(0)
    res = level_resolutions(cfg)
    for _ in range(1000):
        l = int(rng.integers(cfg.levels))
        v = rng.integers(0, res[l] + 1, size=4)
        z = v / res[l]
        assert np.array_equal(z * res[l], v)  # exact dyadic-free check of the construction
        out = encode(z, cfg, tables)
        row = hash_oracle(v.tolist(), HASH_PRIMES, cfg.table_size)
        assert np.array_equal(out[l * 2:(l + 1) * 2], tables.data[l, row])


def test_edge_midpoint_is_mean_of_corners():
    cfg = HashGridConfig(levels=1, features=2, table_size=64, min_res=4, max_res=4)
    tables = HashGridTables.init(cfg, seed=1, scale=1.0)
    z = np.array([1.5, 2.0, 0.0, 3.0]) / 4
    a = tables.data[0, hash_oracle([1, 2, 0, 3], HASH_PRIMES, 64)]
    b = tables.data[0, hash_oracle([2, 2, 0, 3], HASH_PRIMES, 64)]
    np.testing.assert_allclose(encode(z, cfg, tables), 0.5 * (a + b), rtol=0, atol=1e-15)


@given(st.floats(-3, 3), st.lists(st.floats(0, 1), min_size=4, max_size=4))
@settings(max_examples=30, deadline=None)
def test_constant_tables(c, z):
    tables = HashGridTables.constant(SMALL, c)
    np.testing.assert_allclose(encode(np.array(z), SMALL, tables), c, rtol=1e-12, atol=1e-12)


def test_init_range_and_shape():
    tables = HashGridTables.init(SMALL, seed=0)
    assert tables.data.shape == (3, 2**10, 2)
    assert np.abs(tables.data).max() <= 1e-4


def test_deterministic():
    tables = HashGridTables.init(SMALL, seed=5, scale=1.0)
    z = np.random.default_rng(2).random((200, 4))
    assert np.array_equal(encode(z, SMALL, tables), encode(z, SMALL, tables))


def test_upper_face_is_valid():
    tables = HashGridTables.init(SMALL, seed=5, scale=1.0)
    out = encode(np.ones(4), SMALL, tables)
    for l, n in enumerate(level_resolutions(SMALL)):
        row = hash_oracle([n] * 4, HASH_PRIMES, SMALL.table_size)
        assert np.array_equal(out[2 * l:2 * l + 2], tables.data[l, row])


def test_out_of_range_clamps_or_rejects():
    tables = HashGridTables.init(SMALL, seed=5, scale=1.0)
    z = np.array([1.2, -0.1, 0.5, 0.5])
    np.testing.assert_array_equal(encode(z, SMALL, tables), encode(np.clip(z, 0, 1), SMALL, tables))
    strict = HashGridConfig(levels=3, features=2, table_size=2**10, min_res=4, max_res=16, clamp=False)
    with pytest.raises(ValueError):
        encode(z, strict, tables)


def test_continuity_across_cells():
    cfg = HashGridConfig(levels=2, features=2, table_size=2**8, min_res=4, max_res=8)
    tables = HashGridTables.init(cfg, seed=0, scale=1.0)
    rng = np.random.default_rng(1)
    # Lipschitz bound per level: slope along one axis is at most 2 max|entry| * N_l
    lip = sum(2 * np.abs(tables.data).max() * n for n in level_resolutions(cfg))
    for _ in range(200):
        z = rng.random(4) * 0.9 + 0.05
        axis = rng.integers(4)
        face = np.round(z[axis] * 8) / 8  # a shared cell face of the finest level
        eps = 1e-7
        a, b = z.copy(), z.copy()
        a[axis], b[axis] = face - eps, face + eps
        dev = np.abs(encode(a, cfg, tables) - encode(b, cfg, tables)).max()
        assert dev <= lip * 2 * eps * (1 + 1e-6) + 1e-15


def test_forced_collision_is_well_defined():
    cfg = HashGridConfig(levels=1, features=1, table_size=2, min_res=4, max_res=4)
    tables = HashGridTables.init(cfg, seed=0, scale=1.0)
    assert hash_oracle([0, 0, 0, 0], HASH_PRIMES, 2) == hash_oracle([2, 0, 0, 0], HASH_PRIMES, 2)
    out = encode(np.random.default_rng(0).random((50, 4)), cfg, tables)
    assert np.all(np.isfinite(out))


def test_backward_zero_upstream():
    g = encode_backward(np.full(4, 0.3), np.zeros(SMALL.output_dim), SMALL)
    assert not np.any(g.values)


def test_backward_at_vertex_routes_all_mass():
    cfg = HashGridConfig(levels=2, features=2, table_size=2**10, min_res=4, max_res=8)
    z = np.array([1, 2, 3, 0]) / 4.0  # a vertex on both levels
    up = np.arange(1.0, 5.0)
    dense = encode_backward(z, up, cfg).to_dense(cfg)
    for l, n in enumerate(level_resolutions(cfg)):
        row = hash_oracle((z * n).astype(int).tolist(), HASH_PRIMES, cfg.table_size)
        np.testing.assert_array_equal(dense[l, row], up[2 * l:2 * l + 2])
        assert np.count_nonzero(np.abs(dense[l]).sum(axis=1)) == 1


def test_backward_sparsity():
    z = np.random.default_rng(4).random(4)
    g = encode_backward(z, np.ones(SMALL.output_dim), SMALL)
    assert len(g.rows) <= 16 * SMALL.levels


def test_backward_matches_central_differences():
    cfg = HashGridConfig(levels=2, features=2, table_size=64, min_res=3, max_res=5)
    rng = np.random.default_rng(11)
    h = 1e-6
    for _ in range(100):
        tables = HashGridTables.init(cfg, seed=int(rng.integers(1 << 30)), scale=1.0)
        z = rng.random(4)
        up = rng.normal(size=cfg.output_dim)
        grad = encode_backward(z, up, cfg).to_dense(cfg)
        for l, r, f in zip(rng.integers(0, 2, 3), rng.integers(0, 64, 3), rng.integers(0, 2, 3)):
            p, m = HashGridTables(tables.data.copy()), HashGridTables(tables.data.copy())
            p.data[l, r, f] += h
            m.data[l, r, f] -= h
            fd = (up @ encode(z, cfg, p) - up @ encode(z, cfg, m)) / (2 * h)
            assert abs(fd - grad[l, r, f]) <= 1e-5 * max(1.0, abs(fd))


def test_vertex_bank_examples():
    bank_cfg = VertexBankConfig(n_vertices=5, bins=9, features=3)
    bank = np.random.default_rng(0).normal(size=(5, 9, 3))
    zero_bin = int(distance_bin(np.array([0.0]), 1.0, 9)[0])
    out = vertex_bank_lookup(np.array([[2]]), np.array([[0.0]]), np.array([[1.0]]), bank, 1.0)
    np.testing.assert_array_equal(out[0], bank[2, zero_bin])
    const = np.full((5, 9, 3), 0.7)
    out = vertex_bank_lookup(np.array([[1, 3]]), np.array([[0.2, -0.4]]), np.array([[0.25, 0.75]]), const, 1.0)
    np.testing.assert_allclose(out, 0.7)
    assert bank_cfg.output_dim == 3


def test_distance_bin_clamps():
    bins = distance_bin(np.array([-5.0, -1.0, 0.0, 1.0, 5.0]), 1.0, 9)
    assert list(bins) == [0, 0, 4, 8, 8]


def test_frequency_encoding_shape():
    z = np.random.default_rng(0).random((7, 4))
    out = frequency_encode(z, FrequencyConfig(n_freqs=3))
    assert out.shape == (7, FrequencyConfig(n_freqs=3).output_dim)
    np.testing.assert_array_equal(out[:, :4], z)


def test_vertex_exactness_non_dyadic_resolutions():
    # 16 -> 96 over 6 levels gives resolutions like 22 and 67 where v / N * N != v
    cfg = HashGridConfig(levels=6, features=2, table_size=2**14, min_res=16, max_res=96)
    tables = HashGridTables.init(cfg, seed=1, scale=1.0)
    res = level_resolutions(cfg)
    rng = np.random.default_rng(3)
    for _ in range(300):
        l = int(rng.integers(cfg.levels))
        v = rng.integers(0, res[l] + 1, size=4)
        out = encode(v / res[l], cfg, tables)
        assert np.array_equal(out[2 * l:2 * l + 2], tables.data[l, hash_oracle(v.tolist(), HASH_PRIMES, cfg.table_size)])
