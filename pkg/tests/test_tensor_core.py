import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctd.dictionary import Dictionary, PrototypeSpec, make_time_axis
from sctd.tensor_core import (
    CPModel,
    DenseTensor3,
    KruskalModel,
    fold,
    frobenius_norm,
    inner_product,
    khatri_rao,
    kruskal_to_dense,
    rank_one_contract,
    unfold,
)

SMALL_DIMS = list(itertools.product(range(1, 5), repeat=3))


def appendix_unfold(x, mode):
    """Element-by-element unfolding through the 1-based index map."""
    dims = x.shape
    n = mode - 1
    others = [k for k in range(3) if k != n]
    cols = dims[others[0]] * dims[others[1]]
    out = np.zeros((dims[n], cols))
    for idx in itertools.product(*(range(1, d + 1) for d in dims)):
        j, stride = 1, 1
        for k in others:
            j += (idx[k] - 1) * stride
            stride *= dims[k]
        out[idx[n] - 1, j - 1] = x[tuple(i - 1 for i in idx)]
    return out


def brute_kron(a, b):
    return np.array([ai * bj for ai in a for bj in b])


def example_tensor():
    x = np.zeros((2, 2, 2))
    for i1, i2, i3 in itertools.product((1, 2), repeat=3):
        x[i1 - 1, i2 - 1, i3 - 1] = 100 * i1 + 10 * i2 + i3
    return DenseTensor3(x)


def test_unfold_singleton():
    t = DenseTensor3(np.full((1, 1, 1), 5.0))
    for mode in (1, 2, 3):
        assert unfold(t, mode).tolist() == [[5.0]]
        assert fold(np.array([[5.0]]), mode, (1, 1, 1)) == t


def test_unfold_hand_example():
    t = example_tensor()
    m1 = unfold(t, 1)
    assert m1.shape == (2, 4)
    assert m1[0].tolist() == [111, 121, 112, 122]
    m3 = unfold(t, 3)
    assert m3.shape == (2, 4)
    assert m3[0].tolist() == [111, 211, 121, 221]
    for mode in (1, 2, 3):
        assert fold(unfold(t, mode), mode, t.dims) == t


def test_unfold_rejects_bad_mode():
    with pytest.raises(ValueError):
        unfold(example_tensor(), 4)
    with pytest.raises(ValueError):
        fold(np.zeros((2, 3)), 1, (2, 2, 2))


@pytest.mark.parametrize("dims", SMALL_DIMS)
def test_unfold_matches_index_map_exhaustive(dims):
    x = np.arange(np.prod(dims), dtype=float).reshape(dims) + 1
    t = DenseTensor3(x)
    for mode in (1, 2, 3):
        m = unfold(t, mode)
        np.testing.assert_array_equal(m, appendix_unfold(x, mode))
        assert fold(m, mode, dims) == t


def test_fold_unfold_random_fixtures():
    rng = np.random.default_rng(0)
    for _ in range(100):
        dims = tuple(rng.integers(1, 12, size=3))
        t = DenseTensor3(rng.standard_normal(dims))
        for mode in (1, 2, 3):
            assert fold(unfold(t, mode), mode, dims) == t


def test_khatri_rao_examples():
    assert khatri_rao([[1.0]], [[1.0]]).tolist() == [[1.0]]
    kr = khatri_rao(np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]]))
    assert kr.ravel().tolist() == [3, 4, 6, 8]
    with pytest.raises(ValueError):
        khatri_rao(np.ones((2, 2)), np.ones((2, 3)))


def test_khatri_rao_brute_force():
    rng = np.random.default_rng(1)
    cases = [(i, j, k) for i in range(1, 5) for j in range(1, 5) for k in range(1, 5)]
    cases += [tuple(rng.integers(1, 15, size=3)) for _ in range(100)]
    for I, J, K in cases:
        A, B = rng.standard_normal((I, K)), rng.standard_normal((J, K))
        kr = khatri_rao(A, B)
        assert kr.shape == (I * J, K)
        for k in range(K):
            np.testing.assert_array_equal(kr[:, k], brute_kron(A[:, k], B[:, k]))


def test_inner_product_and_norm():
    z = DenseTensor3.zeros((2, 3, 4))
    t = DenseTensor3(np.random.default_rng(2).standard_normal((2, 3, 4)))
    assert inner_product(t, z) == 0
    assert inner_product(t, t) == pytest.approx(frobenius_norm(t) ** 2, rel=1e-14)
    a = DenseTensor3(np.array([1.0, 2.0]).reshape(2, 1, 1))
    b = DenseTensor3(np.array([3.0, 4.0]).reshape(2, 1, 1))
    assert inner_product(a, b) == 11
    assert frobenius_norm(z) == 0
    assert frobenius_norm(DenseTensor3(np.full((1, 1, 1), -3.0))) == 3
    assert frobenius_norm(DenseTensor3(np.ones((2, 3, 4)))) == pytest.approx(np.sqrt(24), rel=1e-15)
    with pytest.raises(ValueError):
        inner_product(t, DenseTensor3.zeros((2, 3, 5)))


def test_inner_product_equals_unfolded():
    rng = np.random.default_rng(3)
    for _ in range(20):
        dims = tuple(rng.integers(1, 7, size=3))
        x, y = DenseTensor3(rng.standard_normal(dims)), DenseTensor3(rng.standard_normal(dims))
        ref = inner_product(x, y)
        for mode in (1, 2, 3):
            assert np.sum(unfold(x, mode) * unfold(y, mode)) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def _random_library(rng, I3, P):
    t = make_time_axis(count=I3)
    specs = [PrototypeSpec("gaussian", (float(rng.uniform(0, I3 - 1)), float(rng.uniform(0.5, I3))))
             for _ in range(P)]
    return Dictionary.from_specs(specs, t)


def _random_kruskal(rng, dims, R, P):
    I1, I2, I3 = dims
    lib = _random_library(rng, I3, P)
    cols = lambda n: (lambda M: M / np.linalg.norm(M, axis=0))(rng.standard_normal((n, R)))
    w = rng.uniform(0.1, 3.0, size=R)
    return KruskalModel(w, cols(I1), cols(I2), cols(P), lib.id), lib


def test_kruskal_paths_agree():
    rng = np.random.default_rng(4)
    cases = [d + (r,) for d in SMALL_DIMS for r in (1, 2)]
    cases += [tuple(rng.integers(1, 10, size=3)) + (int(rng.integers(1, 5)),) for _ in range(100)]
    for I1, I2, I3, R in cases:
        model, lib = _random_kruskal(rng, (I1, I2, I3), R, P=int(rng.integers(1, 6)))
        dense = kruskal_to_dense(model, lib)
        C = lib.matrix @ model.Z
        m3 = C @ np.diag(model.weights) @ khatri_rao(model.B, model.A).T
        other = fold(m3, 3, (I1, I2, I3))
        err = np.linalg.norm(dense.data - other.data) / max(np.linalg.norm(dense.data), 1e-300)
        assert err <= 1e-10


def test_kruskal_examples():
    t = make_time_axis(count=5)
    lib = Dictionary.from_specs([PrototypeSpec("gaussian", (2.0, 1.0)), PrototypeSpec("gaussian", (0.0, 2.0))], t)
    empty = KruskalModel(np.zeros(0), np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((2, 0)), lib.id)
    assert np.all(kruskal_to_dense(empty, lib).data == 0)
    e1 = np.array([[1.0], [0.0]])
    model = KruskalModel([2.0], e1, e1, np.array([[0.0], [1.0]]), lib.id)
    dense = kruskal_to_dense(model, lib).data.copy()
    np.testing.assert_allclose(dense[0, 0], 2 * lib.matrix[:, 1], rtol=0, atol=1e-15)
    dense[0, 0] = 0
    assert not dense.any()
    other = Dictionary.from_specs([PrototypeSpec("gaussian", (1.0, 1.0)), PrototypeSpec("gaussian", (0.0, 2.0))], t)
    with pytest.raises(ValueError):
        kruskal_to_dense(model, other)


def test_phantom_reconstructs_from_factors(phantom):
    m, C = phantom.model, phantom.temporal
    again = sum(m.weights[r] * np.multiply.outer(np.multiply.outer(m.A[:, r], m.B[:, r]), C[:, r])
                for r in range(m.rank))
    np.testing.assert_allclose(again, phantom.clean.data, rtol=0, atol=1e-12 * np.abs(again).max())


def test_kruskal_invariants():
    with pytest.raises(ValueError):
        KruskalModel([1.0], [[2.0]], [[1.0]], [[1.0]])
    with pytest.raises(ValueError):
        KruskalModel([1.0, 2.0], np.ones((2, 1)) / np.sqrt(2), np.ones((2, 1)), np.ones((1, 1)))
    m = KruskalModel([3.0, 1.0], np.eye(2), np.eye(2), np.eye(2))
    assert m.truncate(1).rank == 1
    assert m.truncate(5).rank == 2
    with pytest.raises(ValueError):
        m.weights[0] = 0.0
    with pytest.raises(ValueError):
        CPModel([1.0], np.ones((2, 2)), np.ones((2, 1)), np.ones((2, 1)))


def test_dense_tensor_is_immutable_and_validated():
    t = DenseTensor3(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        t.data[0, 0, 0] = 5
    with pytest.raises(ValueError):
        DenseTensor3(np.ones((2, 2)))
    with pytest.raises(ValueError):
        DenseTensor3(np.full((1, 1, 1), np.nan))
    assert DenseTensor3.from_values((2, 1, 1), [1, 2]).data[1, 0, 0] == 2
    assert (t - t) == DenseTensor3.zeros((2, 2, 2))
    assert (2 * t).data.sum() == 16


def test_rank_one_contract_matches_unfold():
    rng = np.random.default_rng(5)
    t = DenseTensor3(rng.standard_normal((3, 4, 5)))
    a, b, c = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(5)
    for mode, (u, v) in ((1, (c, b)), (2, (c, a)), (3, (b, a))):
        expect = unfold(t, mode) @ np.kron(u, v)
        np.testing.assert_allclose(rank_one_contract(t, mode, u, v), expect, rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        rank_one_contract(t, 1, b, c)


def test_rank_one_contract_examples():
    rng = np.random.default_rng(6)
    t = DenseTensor3(rng.standard_normal((2, 3, 4)))
    e1a, e1b = np.eye(2)[0], np.eye(3)[0]
    np.testing.assert_array_equal(rank_one_contract(t, 3, e1b, e1a), t.data[0, 0, :])
    assert not rank_one_contract(DenseTensor3.zeros((2, 3, 4)), 1, np.ones(4), np.ones(3)).any()


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.integers(1, 6)] * 3), st.integers(0, 2 ** 32 - 1))
def test_fold_unfold_property(dims, seed):
    t = DenseTensor3(np.random.default_rng(seed).standard_normal(dims))
    for mode in (1, 2, 3):
        assert fold(unfold(t, mode), mode, dims) == t
