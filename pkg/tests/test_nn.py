import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hccm import tensor as T
from hccm.nn import EmbeddingTable, MlpParams, attention, embed, mlp_forward, splitmix64
from hccm.tensor import Tensor

MASK = (1 << 64) - 1


def splitmix64_reference(x: int) -> int:
    """Plain-integer SplitMix64 output for state x (one step)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


# ---------------------------------------------------------------- hashing / embed

def test_splitmix64_published_first_output():
    # first output of a SplitMix64 generator seeded with 0
    assert int(splitmix64(np.uint64(0))) == 0xE220A8397B1DCDAF


@settings(max_examples=200, deadline=None)
@given(st.integers(0, MASK), st.integers(0, 1 << 20))
def test_splitmix64_matches_integer_reference(x, seed):
    assert int(splitmix64(np.array([x], dtype=np.uint64), seed)[0]) == splitmix64_reference((x + seed) & MASK)


def test_embed_is_deterministic_and_default_dim_is_8():
    table = EmbeddingTable(64).init(np.random.default_rng(0))
    a, b = embed(table, 12345), embed(table, 12345)
    assert a.shape == (8,)
    np.testing.assert_array_equal(a.data, b.data)


def test_collision_rate_matches_enumerated_hashes():
    table = EmbeddingTable(4, hash_seed=9)
    ids = list(range(1001))
    rows = table.rows(np.array(ids))
    expected = [splitmix64_reference(i + 9) % 4 for i in ids]
    assert rows.tolist() == expected

    def pair_collision_rate(buckets):
        counts = np.bincount(buckets, minlength=4)
        n = len(buckets)
        return (counts * (counts - 1)).sum() / (n * (n - 1))

    assert pair_collision_rate(rows) == pair_collision_rate(np.array(expected))
    assert pair_collision_rate(rows) == pytest.approx(0.25, abs=0.01)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, MASK), st.sampled_from([1, 2, 16, 1024]))
def test_embed_rows_in_bounds_for_any_64bit_id(feature_id, size):
    table = EmbeddingTable(size, dim=2).init(np.random.default_rng(1))
    row = int(table.rows([feature_id])[0])
    assert 0 <= row < size
    np.testing.assert_array_equal(embed(table, feature_id).data, table.weights.data[row])


def test_table_size_must_be_power_of_two():
    with pytest.raises(ValueError):
        EmbeddingTable(12)


def test_embedding_rows_receive_gradient():
    table = EmbeddingTable(8, dim=3).init(np.random.default_rng(2))
    out = table([5, 5, 7])
    T.backward(T.tsum(out))
    r5, r7 = table.rows([5, 7])
    expected = np.zeros((8, 3))
    expected[r5] += 2
    expected[r7] += 1
    np.testing.assert_array_equal(table.weights.grad, expected)


# ---------------------------------------------------------------- mlp

def test_zero_mlp_gives_zero_output():
    p = MlpParams([5, 4, 3], ["relu", "relu"]).init(np.random.default_rng(0), zero=True)
    out = mlp_forward(p, Tensor(np.random.default_rng(1).normal(size=(6, 5))))
    np.testing.assert_array_equal(out.data, np.zeros((6, 3)))


def test_single_linear_layer_is_affine():
    rng = np.random.default_rng(3)
    p = MlpParams([4, 2], ["none"]).init(rng)
    p.biases[0].data[...] = rng.normal(size=2)
    x = rng.normal(size=(5, 4))
    out = mlp_forward(p, Tensor(x))
    np.testing.assert_allclose(out.data, x @ p.weights[0].data + p.biases[0].data, rtol=0, atol=1e-14)


def test_two_layer_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    p = MlpParams([6, 5, 3], ["relu", "none"]).init(rng)
    for b in p.biases:
        b.data[...] = rng.normal(size=b.shape)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = rng.normal(size=(4, 3))
    err = T.grad_check(lambda: T.tsum(T.mul(mlp_forward(p, x), w)), p.tensors() + [x])
    assert err <= 1e-4


def test_mlp_rejects_wrong_input_dim():
    p = MlpParams([3, 2], ["none"]).init(np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        mlp_forward(p, Tensor(np.zeros((1, 4))))


# ---------------------------------------------------------------- attention

def test_single_unmasked_key_returns_its_value():
    rng = np.random.default_rng(5)
    keys, values = rng.normal(size=(3, 4)), rng.normal(size=(3, 2))
    out = attention(Tensor(rng.normal(size=4)), Tensor(keys), Tensor(values), np.array([False, True, False]))
    np.testing.assert_array_equal(out.data, values[1])


def test_identical_keys_average_unmasked_values():
    rng = np.random.default_rng(6)
    keys = np.tile(rng.normal(size=4), (5, 1))
    values = rng.normal(size=(5, 3))
    mask = np.array([True, True, False, True, False])
    out = attention(Tensor(rng.normal(size=4)), Tensor(keys), Tensor(values), mask)
    np.testing.assert_allclose(out.data, values[mask].mean(axis=0), rtol=0, atol=1e-14)


def test_all_masked_attention_raises_unless_allowed():
    q, k = Tensor(np.ones(2)), Tensor(np.ones((2, 2)))
    with pytest.raises(T.EmptyAttentionError):
        attention(q, k, k, np.array([False, False]))
    out = attention(q, k, k, np.array([False, False]), allow_empty=True)
    np.testing.assert_array_equal(out.data, np.zeros(2))


def attention_reference(q, keys, values, mask):
    s = keys @ q / np.sqrt(len(q))
    s = np.where(mask, s, -np.inf)
    w = np.exp(s - s[mask].max())
    return (w / w.sum()) @ values


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_attention_permutation_invariance_and_convex_hull(n, d, seed):
    rng = np.random.default_rng(seed)
    q, keys, values = rng.normal(size=d), rng.normal(size=(n, d)) * 3, rng.normal(size=(n, 3))
    mask = rng.random(n) < 0.7
    mask[rng.integers(n)] = True
    out = attention(Tensor(q), Tensor(keys), Tensor(values), mask).data
    np.testing.assert_allclose(out, attention_reference(q, keys, values, mask), rtol=0, atol=1e-12)

    perm = rng.permutation(n)
    out_p = attention(Tensor(q), Tensor(keys[perm]), Tensor(values[perm]), mask[perm]).data
    np.testing.assert_allclose(out_p, out, rtol=0, atol=1e-12)

    lo, hi = values[mask].min(axis=0), values[mask].max(axis=0)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_batched_attention_gradients():
    rng = np.random.default_rng(7)
    q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 5, 4)), requires_grad=True)
    v = Tensor(rng.normal(size=(3, 5, 2)), requires_grad=True)
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    w = rng.normal(size=(3, 2))
    assert T.grad_check(lambda: T.tsum(T.mul(attention(q, k, v, mask), w)), [q, k, v]) <= 1e-6
