import time

import numpy as np
import pytest
from scipy.sparse.csgraph import shortest_path

from chebgnn.cheb import cheb_apply, cheb_backward, chebyshev_scalar, dense_spectral_oracle
from chebgnn.graph import build_graph, normalized_laplacian, scaled_laplacian

from conftest import central_diff, random_graph, rel_err

ORACLE_RTOL = 1e-10
LINEARITY_TOL = 1e-12
GRAD_RTOL = 1e-5
FD_STEP = 1e-5


def scaled(g):
    return scaled_laplacian(normalized_laplacian(g))


class TestChebApply:
    def test_identity_filter(self, rng):
        s = scaled(random_graph(rng, 8))
        h = rng.standard_normal((8, 3))
        out, tape = cheb_apply(s, [1.0, 0.0, 0.0], h)
        np.testing.assert_array_equal(out, h)
        assert tape.terms[0] is not None and np.array_equal(tape.terms[0], h)

    def test_first_order(self, rng):
        s = scaled(random_graph(rng, 8))
        h = rng.standard_normal((8, 2))
        out, _ = cheb_apply(s, [0.0, 1.0], h)
        np.testing.assert_array_equal(out, s.matrix @ h)

    def test_matches_oracle(self, rng):
        s = scaled(random_graph(rng, 12, weighted=True))
        theta = rng.standard_normal(5)
        h = rng.standard_normal((12, 3))
        out, _ = cheb_apply(s, theta, h)
        ref = dense_spectral_oracle(s.matrix.toarray(), theta, h)
        assert rel_err(out, ref) <= ORACLE_RTOL

    def test_oracle_equivalence_50(self, rng):
        for _ in range(50):
            n = int(rng.integers(4, 31))
            k = int(rng.integers(0, 7))
            s = scaled(random_graph(rng, n, p=rng.uniform(0.1, 0.5), weighted=True))
            theta = rng.standard_normal(k + 1)
            h = rng.standard_normal((n, int(rng.integers(1, 4))))
            out, _ = cheb_apply(s, theta, h)
            assert rel_err(out, dense_spectral_oracle(s.matrix.toarray(), theta, h)) <= ORACLE_RTOL

    def test_vector_signal(self, rng):
        s = scaled(random_graph(rng, 10))
        h = rng.standard_normal(10)
        theta = rng.standard_normal(4)
        out, _ = cheb_apply(s, theta, h)
        assert out.shape == (10,)
        assert rel_err(out, dense_spectral_oracle(s.matrix.toarray(), theta, h)) <= ORACLE_RTOL

    def test_linearity(self, rng):
        s = scaled(random_graph(rng, 15, weighted=True))
        h1, h2 = rng.standard_normal((2, 15, 2))
        t1, t2 = rng.standard_normal((2, 5))
        a, b = 0.7, -1.3
        o1, o2 = cheb_apply(s, t1, h1)[0], cheb_apply(s, t1, h2)[0]
        lhs = cheb_apply(s, t1, a * h1 + b * h2)[0]
        assert np.max(np.abs(lhs - (a * o1 + b * o2))) <= LINEARITY_TOL * max(1, np.abs(lhs).max())
        p1, p2 = cheb_apply(s, t1, h1)[0], cheb_apply(s, t2, h1)[0]
        lhs = cheb_apply(s, a * t1 + b * t2, h1)[0]
        assert np.max(np.abs(lhs - (a * p1 + b * p2))) <= LINEARITY_TOL * max(1, np.abs(lhs).max())

    def test_dimension_mismatch(self, rng):
        s = scaled(random_graph(rng, 5))
        with pytest.raises(ValueError):
            cheb_apply(s, [1.0, 2.0], np.ones((6, 1)))

    def test_locality(self, rng):
        g = random_graph(rng, 30, p=0.06)
        s = scaled(g)
        dist = shortest_path(g.adjacency, unweighted=True)
        for k in range(0, 5):
            theta = np.zeros(k + 1)
            theta[k] = 1.0
            h = rng.standard_normal((30, 1))
            u = int(rng.integers(30))
            far = dist[u] > k
            h2 = h.copy()
            h2[far] = 0.0
            assert cheb_apply(s, theta, h)[0][u] == pytest.approx(cheb_apply(s, theta, h2)[0][u], abs=1e-12)


class TestOracle:
    def test_identity(self, rng):
        a = scaled(random_graph(rng, 6)).matrix.toarray()
        h = rng.standard_normal((6, 2))
        np.testing.assert_allclose(dense_spectral_oracle(a, [1.0, 0.0, 0.0], h), h, atol=1e-12)

    def test_diagonal_t2(self):
        out = dense_spectral_oracle(np.diag([-1.0, 0.0, 1.0]), [0, 0, 1], np.eye(3))
        np.testing.assert_allclose(out, np.diag([1.0, -1.0, 1.0]), atol=1e-15)

    def test_scalar_chebyshev_closed_form(self):
        x = np.linspace(-1, 1, 41)
        t = chebyshev_scalar(x, 6)
        np.testing.assert_allclose(t, np.cos(np.arange(7)[:, None] * np.arccos(x)[None, :]), atol=1e-13)

    def test_rejects_nonsymmetric(self):
        with pytest.raises(np.linalg.LinAlgError):
            dense_spectral_oracle(np.array([[0.0, 1.0], [0.0, 0.0]]), [1.0], np.ones(2))


class TestChebBackward:
    def test_identity_grad(self, rng):
        s = scaled(random_graph(rng, 7))
        h = rng.standard_normal((7, 2))
        g = rng.standard_normal((7, 2))
        _, tape = cheb_apply(s, [1.0, 0.0], h)
        _, gh = cheb_backward(tape, s, [1.0, 0.0], g)
        np.testing.assert_array_equal(gh, g)

    def test_k0(self, rng):
        s = scaled(random_graph(rng, 7))
        h = rng.standard_normal((7, 2))
        g = rng.standard_normal((7, 2))
        _, tape = cheb_apply(s, [2.5], h)
        gt, gh = cheb_backward(tape, s, [2.5], g)
        assert gt[0] == pytest.approx(np.sum(g * h), rel=1e-14)
        np.testing.assert_allclose(gh, 2.5 * g)

    def test_finite_differences(self, rng):
        for trial in range(20):
            n = 10 if trial == 0 else int(rng.integers(4, 14))
            k = 3 if trial == 0 else int(rng.integers(0, 6))
            s = scaled(random_graph(rng, n, weighted=True))
            theta = rng.standard_normal(k + 1)
            h = rng.standard_normal((n, 2))
            g = rng.standard_normal((n, 2))
            _, tape = cheb_apply(s, theta, h)
            gt, gh = cheb_backward(tape, s, theta, g)
            f = lambda: float(np.sum(g * cheb_apply(s, theta, h)[0]))  # noqa: E731
            assert rel_err(gt, central_diff(f, theta, FD_STEP)) <= GRAD_RTOL
            assert rel_err(gh, central_diff(f, h, FD_STEP)) <= GRAD_RTOL

    def test_stale_tape(self, rng):
        s = scaled(random_graph(rng, 6))
        s2 = scaled(random_graph(rng, 6))
        h = rng.standard_normal((6, 1))
        _, tape = cheb_apply(s, [1.0, 2.0], h)
        with pytest.raises(ValueError, match="tape"):
            cheb_backward(tape, s2, [1.0, 2.0], h)
        with pytest.raises(ValueError, match="tape"):
            cheb_backward(tape, s, [1.0, 3.0], h)


def _ring_lattice(n, half_degree):
    offs = np.arange(1, half_degree + 1)
    rows = np.repeat(np.arange(n), len(offs))
    cols = (rows + np.tile(offs, n)) % n
    return build_graph(n, np.stack([rows, cols], axis=1))


@pytest.mark.slow
def test_cost_scales_linearly_in_edges():
    """Log-log slope of cheb_apply runtime vs. edge count stays within 1.0 +- 0.15."""
    k, d = 5, 4
    theta = np.ones(k + 1)
    sizes, times = [], []
    rng = np.random.default_rng(0)
    for n in [250, 2_500, 25_000, 250_000]:  # 1e3 .. 1e6 edges
        g = _ring_lattice(n, 4)
        s = scaled(g)
        h = rng.standard_normal((n, d))
        reps = max(1, 250_000 // n)
        best = np.inf
        for _ in range(5):
            t0 = time.perf_counter()
            for _ in range(reps):
                cheb_apply(s, theta, h)
            best = min(best, (time.perf_counter() - t0) / reps)
        sizes.append(g.n_edges)
        times.append(best)
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    assert 0.85 <= slope <= 1.15, (sizes, times, slope)
