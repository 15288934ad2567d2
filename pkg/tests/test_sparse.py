import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esrf.errors import InputError
from esrf.sparse import (
    SparseMatrix,
    all_motif_adjacencies,
    build_motif_set,
    combined_adjacency,
    csr_from_triplets,
    masked_sparse_product,
    motif_adjacency,
    row_normalize,
    sparse_product,
    split_bidirectional,
)

from oracles import brute_force_motifs, dense_masked_product


def random_graph(rng, m, n, density=0.2):
    s = (rng.random((m, m)) < density).astype(float)
    np.fill_diagonal(s, 0)
    y = (rng.random((m, n)) < density).astype(float)
    return s, y


class TestCsrFromTriplets:
    def test_single_entry(self):
        a = csr_from_triplets(2, 2, [(0, 1, 1)])
        assert a.nnz == 1
        np.testing.assert_array_equal(a.to_dense(), [[0, 1], [0, 0]])

    def test_duplicates_summed(self):
        a = csr_from_triplets(2, 2, [(0, 1, 1), (0, 1, 2)])
        assert a.nnz == 1
        assert a.to_dense()[0, 1] == 3

    def test_out_of_range(self):
        with pytest.raises(InputError, match=r"\(0, 5, 1\)"):
            csr_from_triplets(2, 2, [(0, 5, 1)])

    def test_canonical_order(self):
        a = csr_from_triplets(3, 3, [(2, 0, 1), (0, 2, 1), (0, 0, 4), (2, 1, 1)])
        np.testing.assert_array_equal(a.row_offsets, [0, 2, 2, 4])
        np.testing.assert_array_equal(a.col_indices, [0, 2, 0, 1])

    def test_invariants_enforced(self):
        with pytest.raises(InputError):
            SparseMatrix(1, 3, np.array([0, 2]), np.array([2, 1]), np.array([1.0, 1.0]))
        with pytest.raises(InputError):
            SparseMatrix(1, 3, np.array([0, 1]), np.array([1]), np.array([0.0]))


class TestSplitBidirectional:
    def test_mutual_pair(self):
        s = SparseMatrix.from_dense([[0, 1], [1, 0]])
        b, u = split_bidirectional(s)
        assert b.equals(s)
        assert u.nnz == 0

    def test_one_way(self):
        s = SparseMatrix.from_dense([[0, 1], [0, 0]])
        b, u = split_bidirectional(s)
        assert b.nnz == 0
        assert u.equals(s)

    def test_three_node_mix_edge_by_edge(self):
        dense = np.array([[0, 1, 1], [1, 0, 0], [0, 1, 0]])
        b, u = split_bidirectional(SparseMatrix.from_dense(dense))
        for i in range(3):
            for j in range(3):
                if not dense[i, j]:
                    assert b.to_dense()[i, j] == 0 and u.to_dense()[i, j] == 0
                elif dense[j, i]:
                    assert b.to_dense()[i, j] == 1 and u.to_dense()[i, j] == 0
                else:
                    assert b.to_dense()[i, j] == 0 and u.to_dense()[i, j] == 1
        assert b.is_symmetric()

    def test_rejects_non_binary_and_non_square(self):
        with pytest.raises(InputError):
            split_bidirectional(SparseMatrix.from_dense([[0, 2], [1, 0]]))
        with pytest.raises(InputError):
            split_bidirectional(SparseMatrix.from_dense([[0, 1, 0], [1, 0, 0]]))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_partition_property(self, seed):
        rng = np.random.default_rng(seed)
        s, _ = random_graph(rng, 12, 1, density=0.3)
        b, u = split_bidirectional(SparseMatrix.from_dense(s))
        assert b.is_symmetric()
        assert u.hadamard(u.transpose()).nnz == 0
        np.testing.assert_array_equal(b.to_dense() + u.to_dense(), s)


class TestMaskedProduct:
    def test_identity(self):
        eye = SparseMatrix.from_dense(np.eye(2))
        assert masked_sparse_product(eye, eye, eye).equals(eye)

    def test_empty_mask(self):
        p = SparseMatrix.from_dense(np.ones((3, 3)))
        out = masked_sparse_product(p, p, SparseMatrix.zeros(3, 3))
        assert out.nnz == 0

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            masked_sparse_product(
                SparseMatrix.zeros(2, 3), SparseMatrix.zeros(2, 2), SparseMatrix.zeros(2, 2)
            )

    def test_random_8x8_against_triple_loop(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p, q, t = ((rng.random((8, 8)) < 0.4).astype(float) for _ in range(3))
            got = masked_sparse_product(*(SparseMatrix.from_dense(x) for x in (p, q, t)))
            np.testing.assert_array_equal(got.to_dense(), dense_masked_product(p, q, t))

    @given(
        st.integers(1, 32), st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**31 - 1)
    )
    @settings(max_examples=60, deadline=None)
    def test_integer_instances_exact(self, a, b, c, seed):
        rng = np.random.default_rng(seed)
        p = rng.integers(0, 3, (a, b)) * (rng.random((a, b)) < 0.3)
        q = rng.integers(0, 3, (b, c)) * (rng.random((b, c)) < 0.3)
        t = rng.integers(0, 3, (a, c)) * (rng.random((a, c)) < 0.5)
        got = masked_sparse_product(*(SparseMatrix.from_dense(x) for x in (p, q, t)))
        np.testing.assert_array_equal(got.to_dense(), (p @ q) * t)

    def test_unmasked_product(self):
        rng = np.random.default_rng(3)
        p = rng.integers(0, 4, (9, 13)) * (rng.random((9, 13)) < 0.3)
        q = rng.integers(0, 4, (13, 5)) * (rng.random((13, 5)) < 0.3)
        got = sparse_product(SparseMatrix.from_dense(p), SparseMatrix.from_dense(q))
        np.testing.assert_array_equal(got.to_dense(), p @ q)


class TestMotifAdjacency:
    def test_directed_cycle_m1(self):
        s = SparseMatrix.from_dense([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
        y = SparseMatrix.zeros(3, 1)
        a = motif_adjacency(s, y, "M1").to_dense()
        np.testing.assert_array_equal(a, 1 - np.eye(3))
        oracle = brute_force_motifs(s.to_dense(), y.to_dense())["M1"]
        np.testing.assert_array_equal(a, oracle)

    def test_m8_single_instance(self):
        # u3 <-> u4 (indices 0, 1) both consumed item i4 (index 0)
        s = SparseMatrix.from_dense([[0, 1], [1, 0]])
        y = SparseMatrix.from_dense([[1], [1]])
        a = motif_adjacency(s, y, "M8")
        assert a.to_dense()[0, 1] == 1 and a.to_dense()[1, 0] == 1

    def test_m10_threshold_is_strict(self):
        s = SparseMatrix.zeros(2, 2)
        five = SparseMatrix.from_dense(np.ones((2, 5)))
        assert motif_adjacency(s, five, 10).nnz == 0
        six = SparseMatrix.from_dense(np.ones((2, 6)))
        np.testing.assert_array_equal(motif_adjacency(s, six, 10).to_dense(), [[0, 6], [6, 0]])

    def test_unknown_motif(self):
        with pytest.raises(InputError):
            motif_adjacency(SparseMatrix.zeros(2, 2), SparseMatrix.zeros(2, 1), "M11")

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_all_motifs_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(3, 20))
        n = int(rng.integers(1, 12))
        s, y = random_graph(rng, m, n, density=float(rng.uniform(0.1, 0.5)))
        got = all_motif_adjacencies(SparseMatrix.from_dense(s), SparseMatrix.from_dense(y))
        want = brute_force_motifs(s, y)
        for key, mat in got.items():
            np.testing.assert_array_equal(mat.to_dense(), want[key], err_msg=key)
            assert mat.is_symmetric()
            assert not np.any(np.diag(mat.to_dense()))
        assert np.all(got["M10"].values > 5)


class TestCombinedAdjacency:
    def test_isolated_user_gets_self_loop(self):
        s = SparseMatrix.from_dense([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
        ms = build_motif_set(s, SparseMatrix.zeros(3, 2))
        np.testing.assert_array_equal(ms.normalized.to_dense()[2], [0, 0, 1])

    def test_row_normalization(self):
        a = SparseMatrix.from_dense([[0, 3, 1], [1, 0, 0], [1, 0, 0]])
        np.testing.assert_allclose(row_normalize(a).to_dense()[0], [0, 0.75, 0.25])

    def test_sum_of_parts(self):
        rng = np.random.default_rng(11)
        s, y = random_graph(rng, 15, 20, 0.3)
        S, Y = SparseMatrix.from_dense(s), SparseMatrix.from_dense(y)
        motifs = all_motif_adjacencies(S, Y)
        ms = combined_adjacency(S, motifs)
        expected = s + sum(m.to_dense() for m in motifs.values())
        np.testing.assert_array_equal(ms.combined.to_dense(), expected)
        np.testing.assert_allclose(ms.normalized.row_sums(), 1.0, atol=1e-9)

    def test_binarized_mode(self):
        rng = np.random.default_rng(5)
        s, y = random_graph(rng, 12, 30, 0.4)
        S, Y = SparseMatrix.from_dense(s), SparseMatrix.from_dense(y)
        motifs = all_motif_adjacencies(S, Y)
        ms = combined_adjacency(S, motifs, binarize=True)
        expected = s + sum((m.to_dense() > 0).astype(float) for m in motifs.values())
        np.testing.assert_array_equal(ms.combined.to_dense(), expected)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            combined_adjacency(SparseMatrix.zeros(3, 3), {"M1": SparseMatrix.zeros(2, 2)})
