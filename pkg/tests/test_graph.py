import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from chebgnn.graph import (
    GraphError,
    batch,
    build_graph,
    degree_vector,
    estimate_lambda_max,
    gcn_propagation,
    normalized_laplacian,
    scaled_laplacian,
    spmm,
)

from conftest import random_graph

P2 = lambda: build_graph(2, [(0, 1)])  # noqa: E731
K3 = lambda: build_graph(3, [(0, 1), (1, 2), (0, 2)])  # noqa: E731


class TestBuildGraph:
    def test_p2_csr(self):
        g = P2()
        assert g.indptr.tolist() == [0, 1, 2]
        assert g.indices.tolist() == [1, 0]

    def test_triangle_degrees(self):
        assert degree_vector(K3()).tolist() == [2, 2, 2]

    def test_duplicate_edges_collapse(self):
        g = build_graph(4, [(0, 1), (0, 1)])
        dense = np.zeros((4, 4))
        for u, v in [(0, 1), (0, 1)]:
            dense[u, v] += 1
            dense[v, u] += 1
        np.testing.assert_array_equal(g.adjacency.toarray(), dense)
        assert g.adjacency[0, 1] == 2.0 and g.n_edges == 1

    def test_reversed_duplicates_also_collapse(self):
        g = build_graph(3, [(0, 1), (1, 0)], [1.5, 0.5])
        assert g.adjacency[1, 0] == 2.0

    @pytest.mark.parametrize(
        "edges,weights,match",
        [([(0, 3)], None, "out of range"), ([(1, 1)], None, "self-loop"), ([(0, 1)], [-1.0], "non-negative")],
    )
    def test_errors(self, edges, weights, match):
        with pytest.raises(GraphError, match=match):
            build_graph(3, edges, weights)

    def test_invariants_random(self, rng):
        for _ in range(20):
            g = random_graph(rng, int(rng.integers(2, 30)), weighted=True)
            a = g.adjacency
            assert (abs(a - a.T) > 0).nnz == 0
            assert np.all(a.diagonal() == 0)
            for u in range(g.n_nodes):
                row = g.indices[g.indptr[u] : g.indptr[u + 1]]
                assert np.all(np.diff(row) > 0)


class TestDegree:
    def test_star(self):
        g = build_graph(4, [(0, 1), (0, 2), (0, 3)])
        np.testing.assert_array_equal(degree_vector(g), g.adjacency.toarray().sum(axis=1))
        assert degree_vector(g).tolist() == [3, 1, 1, 1]

    def test_p2(self):
        assert degree_vector(P2()).tolist() == [1, 1]


class TestLaplacian:
    def test_p2(self):
        lap = normalized_laplacian(P2()).toarray()
        np.testing.assert_allclose(lap, [[1, -1], [-1, 1]])
        np.testing.assert_allclose(np.linalg.eigvalsh(lap), [0, 2], atol=1e-12)

    def test_k3(self):
        lap = normalized_laplacian(K3()).toarray()
        np.testing.assert_allclose(np.diag(lap), 1)
        np.testing.assert_allclose(lap[~np.eye(3, dtype=bool)], -0.5)
        np.testing.assert_allclose(np.linalg.eigvalsh(lap), [0, 1.5, 1.5], atol=1e-12)

    def test_isolated_node_is_identity_row(self):
        g = build_graph(3, [(0, 1)])
        lap = normalized_laplacian(g).toarray()
        np.testing.assert_array_equal(lap[2], [0, 0, 1])
        np.testing.assert_array_equal(lap[:, 2], [0, 0, 1])

    def test_spectrum_bounds(self, rng):
        for _ in range(100):
            g = random_graph(rng, int(rng.integers(5, 51)), p=rng.uniform(0.05, 0.6), weighted=True)
            lam = np.linalg.eigvalsh(normalized_laplacian(g).toarray())
            assert lam.min() >= -1e-9 and lam.max() <= 2 + 1e-9
            lam_s = np.linalg.eigvalsh(scaled_laplacian(normalized_laplacian(g)).matrix.toarray())
            assert lam_s.min() >= -1 - 1e-9 and lam_s.max() <= 1 + 1e-9

    def test_null_vector_per_component(self, rng):
        g1 = random_graph(rng, 7)
        g2 = random_graph(rng, 5)
        bg = batch([g1, g2])
        lap = normalized_laplacian(bg.graph)
        d = degree_vector(bg.graph)
        for lo, hi in zip(bg.offsets[:-1], bg.offsets[1:]):
            v = np.zeros(bg.n_nodes)
            v[lo:hi] = np.sqrt(d[lo:hi])
            assert np.linalg.norm(lap @ v) <= 1e-9


class TestScaledLaplacian:
    def test_p2(self):
        s = scaled_laplacian(normalized_laplacian(P2())).matrix.toarray()
        np.testing.assert_allclose(s, [[0, -1], [-1, 0]])
        np.testing.assert_allclose(np.linalg.eigvalsh(s), [-1, 1], atol=1e-12)

    def test_k3(self):
        s = scaled_laplacian(normalized_laplacian(K3())).matrix.toarray()
        np.testing.assert_allclose(np.diag(s), 0, atol=1e-15)
        np.testing.assert_allclose(np.linalg.eigvalsh(s), [-1, 0.5, 0.5], atol=1e-12)

    def test_identity_shift(self, rng):
        lap = normalized_laplacian(random_graph(rng, 12, weighted=True))
        s = scaled_laplacian(lap, 2.0).matrix
        assert abs((s + sp.identity(12)) - lap).max() == 0.0

    def test_general_lambda(self, rng):
        lap = normalized_laplacian(random_graph(rng, 9))
        s = scaled_laplacian(lap, 1.5).matrix.toarray()
        np.testing.assert_allclose(s, (2 / 1.5) * lap.toarray() - np.eye(9), atol=1e-14)

    @pytest.mark.parametrize("lam", [0.0, -1.0])
    def test_bad_lambda(self, lam):
        with pytest.raises(GraphError):
            scaled_laplacian(normalized_laplacian(P2()), lam)


class TestSpmm:
    def test_identity(self, rng):
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(spmm(sp.identity(5, format="csr"), x), x)

    def test_p2(self):
        s = scaled_laplacian(normalized_laplacian(P2()))
        np.testing.assert_array_equal(spmm(s, np.array([[1.0], [0.0]])), [[0.0], [-1.0]])

    def test_random_against_dense(self, rng):
        m = sp.random(10, 10, density=0.4, random_state=1, format="csr")
        x = rng.standard_normal((10, 4))
        out = spmm(m, x)
        ref = m.toarray() @ x
        assert np.linalg.norm(out - ref) <= 1e-12 * np.linalg.norm(ref)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_property_dense_equivalence(self, n, c, seed):
        r = np.random.default_rng(seed)
        m = sp.random(n, n, density=0.3, random_state=seed % 1000, format="csr")
        x = r.standard_normal((n, c))
        ref = m.toarray() @ x
        out = spmm(m, x)
        assert np.linalg.norm(out - ref) <= 1e-12 * max(np.linalg.norm(ref), 1e-300) + 1e-300

    def test_dimension_mismatch(self):
        with pytest.raises(GraphError):
            spmm(sp.identity(3, format="csr"), np.ones((4, 1)))

    def test_deterministic(self, rng):
        lap = normalized_laplacian(random_graph(rng, 40, weighted=True))
        x = rng.standard_normal((40, 8))
        assert np.array_equal(spmm(lap, x), spmm(lap, x))


class TestBatch:
    def test_two_paths(self):
        bg = batch([P2(), P2()])
        assert bg.n_nodes == 4
        assert sorted(map(tuple, bg.graph.edge_list().tolist())) == [(0, 1), (2, 3)]
        assert bg.offsets.tolist() == [0, 2, 4]

    def test_singleton(self):
        k3 = K3()
        bg = batch([k3])
        assert bg.offsets.tolist() == [0, 3]
        assert (bg.graph.adjacency != k3.adjacency).nnz == 0

    def test_block_diagonal_laplacian(self, rng):
        gs = [random_graph(rng, int(rng.integers(3, 12)), weighted=True) for _ in range(3)]
        bg = batch(gs)
        blocks = sp.block_diag([scaled_laplacian(normalized_laplacian(g)).matrix for g in gs]).toarray()
        np.testing.assert_array_equal(bg.scaled_laplacian().matrix.toarray(), blocks)

    def test_features_and_labels_concatenate(self):
        a = build_graph(2, [(0, 1)], features=[1, 2], node_labels=[0, 1])
        b = build_graph(1, [], features=[3], node_labels=[1])
        bg = batch([a, b])
        assert bg.graph.features.tolist() == [1, 2, 3]
        assert bg.graph.node_labels.tolist() == [0, 1, 1]

    def test_errors(self):
        with pytest.raises(GraphError):
            batch([])
        a = build_graph(2, [(0, 1)], features=[1, 2])
        b = build_graph(2, [(0, 1)], features=np.ones((2, 3)))
        with pytest.raises(GraphError, match="mixed"):
            batch([a, b])


class TestLambdaMax:
    def test_p2(self):
        assert abs(estimate_lambda_max(normalized_laplacian(P2())) - 2.0) <= 1e-6

    def test_k3(self):
        assert abs(estimate_lambda_max(normalized_laplacian(K3())) - 1.5) <= 1e-6

    def test_identity(self):
        assert estimate_lambda_max(sp.identity(6, format="csr")) == pytest.approx(1.0, abs=1e-12)

    def test_matches_dense(self, rng):
        lap = normalized_laplacian(random_graph(rng, 25, p=0.2))
        ref = np.linalg.eigvalsh(lap.toarray()).max()
        assert abs(estimate_lambda_max(lap, iters=20000, tol=1e-14) - ref) <= 1e-6


class TestGcnPropagation:
    def test_single_node(self):
        assert gcn_propagation(build_graph(1, [])).toarray().tolist() == [[1.0]]

    def test_p2(self):
        np.testing.assert_allclose(gcn_propagation(P2()).toarray(), [[0.5, 0.5], [0.5, 0.5]])
