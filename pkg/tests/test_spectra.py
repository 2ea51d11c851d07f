import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import jacobi_eigenvalues
from taphess.spectra import (
    EigenDecomposition,
    EsdCurve,
    SlowConvergenceError,
    goe,
    haar_abs_statistic,
    ks_distance,
    save_eigenvalues,
    save_histogram,
    semicircle_cdf,
    sym_eigen,
    top_eigenvalue,
    top_eigpair,
)


def random_symmetric(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    return (a + a.T) / 2


class TestSymEigen:
    def test_diagonal(self):
        d = sym_eigen(np.diag([3.0, 1.0, 2.0]), want_vectors=True)
        assert np.array_equal(d.eigenvalues, [3.0, 2.0, 1.0])
        assert d.lambda1 == 3.0
        assert np.allclose(np.abs(d.eigenvectors[:, 0]), [1, 0, 0])

    @pytest.mark.parametrize("seed", range(3))
    def test_jacobi_oracle(self, seed):
        a = random_symmetric(12, seed)
        assert np.allclose(sym_eigen(a).eigenvalues, jacobi_eigenvalues(a), atol=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 10_000))
    def test_trace_orthogonality_reconstruction(self, n, seed):
        a = random_symmetric(n, seed)
        d = sym_eigen(a, want_vectors=True)
        assert d.eigenvalues.sum() == pytest.approx(np.trace(a), abs=1e-10)
        v = d.eigenvectors
        assert np.allclose(v.T @ v, np.eye(n), atol=1e-12)
        assert np.allclose(d.reconstruct(), a, atol=1e-11)
        assert np.all(np.diff(d.eigenvalues) <= 0)

    def test_reconstruct_needs_vectors(self):
        with pytest.raises(ValueError):
            sym_eigen(np.eye(2)).reconstruct()

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            sym_eigen(np.array([[0.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(ValueError):
            sym_eigen(np.zeros((2, 3)))

    def test_goe_top_eigenvalue(self):
        m = goe(1500, np.random.default_rng(3))
        assert abs(sym_eigen(m).lambda1 - 2) < 0.1

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 1000), st.floats(0.01, 3.0))
    def test_weyl_bound(self, n, seed, eps):
        a = random_symmetric(n, seed)
        e = random_symmetric(n, seed + 1)
        e *= eps / np.linalg.norm(e, 2)
        la, lb = sym_eigen(a).eigenvalues, sym_eigen(a + e).eigenvalues
        assert np.max(np.abs(la - lb)) <= eps + 1e-10


class TestTopEigpair:
    @pytest.mark.parametrize("method", ["lanczos", "power"])
    def test_diagonal(self, method):
        res = top_eigpair(np.diag([3.0, 1.0, 2.0, -5.0]), method=method)
        assert res.value == pytest.approx(3.0, abs=1e-8)
        assert abs(res.vector[0]) == pytest.approx(1.0, abs=1e-8)

    def test_unpacks(self):
        lam, v = top_eigpair(np.diag([1.0, 2.0]))
        assert lam == pytest.approx(2.0)
        assert v.shape == (2,)

    @pytest.mark.parametrize("seed", range(3))
    def test_residual_and_norm(self, seed):
        a = goe(300, np.random.default_rng(seed))
        res = top_eigpair(a, tol=1e-8)
        assert res.residual < 1e-8
        assert np.linalg.norm(res.vector) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(a @ res.vector - res.value * res.vector) < 1e-8
        assert res.value == pytest.approx(sym_eigen(a).lambda1, abs=1e-10)

    def test_power_on_separated_spectrum(self):
        a = goe(100, np.random.default_rng(5)) + 3 * np.outer(np.ones(100), np.ones(100)) / 100
        res = top_eigpair(a, method="power")
        assert res.value == pytest.approx(sym_eigen(a).lambda1, abs=1e-9)

    def test_power_stall_raises(self):
        a = goe(200, np.random.default_rng(6))
        with pytest.raises(SlowConvergenceError):
            top_eigpair(a, method="power", max_iter=3)

    def test_degenerate_flag(self):
        res = top_eigpair(np.diag([2.0, 2.0, 1.0, 0.0]))
        assert res.degenerate
        assert res.value == pytest.approx(2.0)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            top_eigpair(np.eye(3), method="qr")


class TestStiffTopEigenvalue:
    def test_matches_dense_when_not_stiff(self):
        a = random_symmetric(50, 1)
        assert top_eigenvalue(a) == pytest.approx(sym_eigen(a).lambda1, abs=1e-12)

    def test_moderately_stiff_against_dense(self):
        # stiff enough to trigger elimination, mild enough for a dense check
        a = goe(200, np.random.default_rng(2))
        idx = np.arange(0, 200, 7)
        a[idx, idx] = -1e5
        assert top_eigenvalue(a) == pytest.approx(np.linalg.eigvalsh(a)[-1], abs=1e-9)

    def test_astronomical_diagonal(self):
        n = 300
        base = goe(n, np.random.default_rng(4))
        idx = np.arange(0, n, 10)
        keep = np.setdiff1d(np.arange(n), idx)
        a = base.copy()
        a[idx, idx] = -1e20
        # eliminated sites decouple to O(1e-20): the answer is the top of the kept block
        expected = np.linalg.eigvalsh(base[np.ix_(keep, keep)])[-1]
        assert top_eigenvalue(a) == pytest.approx(expected, abs=1e-12)

    def test_all_stiff_rejected(self):
        with pytest.raises(ValueError):
            top_eigenvalue(np.diag([-1e20, -1e20]) + np.array([[0, 1e-3], [1e-3, 0]]))


class TestKs:
    def test_self_distance_point_masses(self):
        esd = EsdCurve([0.0, 0.0, 1.0, 2.0])
        assert ks_distance(esd, esd.cdf, esd.cdf_left) == 0.0

    def test_point_mass_without_left_limit(self):
        esd = EsdCurve([0.0, 0.0, 1.0, 2.0])
        assert ks_distance(esd, esd.cdf) == pytest.approx(0.5)

    def test_single_point_against_uniform(self):
        esd = EsdCurve([0.5])
        assert ks_distance(esd, lambda x: np.clip(x, 0, 1)) == pytest.approx(0.5)

    def test_known_value(self):
        esd = EsdCurve([0.1, 0.2, 0.9])
        uniform = lambda x: np.clip(x, 0, 1)  # noqa: E731
        # gaps: |1/3 - 0.2|, |2/3 - 0.2|=0.4667, |0.9 - 2/3|, |1 - 0.9|
        assert ks_distance(esd, uniform) == pytest.approx(2 / 3 - 0.2)

    def test_semicircle_small(self):
        eig = sym_eigen(goe(1500, np.random.default_rng(8)))
        assert ks_distance(EsdCurve.from_eigen(eig), semicircle_cdf) < 0.03

    def test_rejects_non_monotone_reference(self):
        with pytest.raises(ValueError):
            ks_distance(EsdCurve([0.0, 1.0]), lambda x: 1 - np.asarray(x))

    def test_empty(self):
        with pytest.raises(ValueError):
            EsdCurve([])

    @settings(max_examples=30)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=50))
    def test_range(self, xs):
        d = ks_distance(EsdCurve(xs), semicircle_cdf)
        assert 0.0 <= d <= 1.0

    def test_cdf_is_right_continuous(self):
        esd = EsdCurve([1.0, 2.0])
        assert esd.cdf(1.0) == 0.5
        assert esd.cdf_left(1.0) == 0.0


class TestSemicircle:
    def test_values(self):
        assert semicircle_cdf(0.0) == pytest.approx(0.5)
        assert semicircle_cdf(-2.0) == 0.0
        assert semicircle_cdf(2.0) == 1.0
        assert semicircle_cdf(7.0, beta=3.0) == pytest.approx(semicircle_cdf(7 / 3))

    def test_density_by_difference(self):
        x, e = 0.7, 1e-6
        fd = (semicircle_cdf(x + e) - semicircle_cdf(x - e)) / (2 * e)
        assert fd == pytest.approx(math.sqrt(4 - x * x) / (2 * math.pi), rel=1e-6)


class TestHaar:
    def test_uniform_direction(self):
        v = np.random.default_rng(0).standard_normal(100_000)
        v /= np.linalg.norm(v)
        assert haar_abs_statistic(v) == pytest.approx(math.sqrt(2 / math.pi), abs=0.01)

    def test_flat_vector(self):
        assert haar_abs_statistic(np.ones(16) / 4) == pytest.approx(1.0)

    def test_requires_unit(self):
        with pytest.raises(ValueError):
            haar_abs_statistic(np.ones(4))

    def test_goe_eigenvector(self):
        res = top_eigpair(goe(800, np.random.default_rng(1)))
        assert abs(haar_abs_statistic(res.vector) - math.sqrt(2 / math.pi)) < 0.05


def test_goe_scaling():
    m = goe(2000, np.random.default_rng(2), beta=2.0)
    off = m[np.triu_indices(2000, 1)]
    assert off.var() * 2000 == pytest.approx(4.0, rel=0.02)
    assert np.array_equal(m, m.T)


def test_save_files(tmp_path):
    eig = EigenDecomposition(np.array([2.0, 1.0, -0.5]))
    save_eigenvalues(eig, tmp_path / "e.txt")
    assert np.array_equal(np.loadtxt(tmp_path / "e.txt", skiprows=1), eig.eigenvalues)
    save_histogram(EsdCurve(eig.eigenvalues), tmp_path / "h.csv", bins=3)
    rows = np.loadtxt(tmp_path / "h.csv", delimiter=",", skiprows=1)
    assert rows[:, 2].sum() == 3
