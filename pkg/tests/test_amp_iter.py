import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from taphess.amp_iter import (
    GramSchmidtError,
    amp_init,
    amp_step,
    diagnostics,
    dump_state_csv,
    inner,
    projection_P,
    run_amp,
    sample_disorder,
    symmetrize,
)
from taphess.rng import DISORDER, MAGNETIZATION, derive_seed, generator
from taphess.rs_core import ModelParams, default_rule, solve_q
from taphess.spectra import EsdCurve, ks_distance, semicircle_cdf

P = ModelParams(1.0, 0.5)
RS = solve_q(P)


def orthonormality_error(phis):
    phi = np.vstack(phis)
    gram = phi @ phi.T / phi.shape[1]
    return float(np.max(np.abs(gram - np.eye(len(phis)))))


class TestRng:
    def test_derive_seed_separates_purposes_and_replicas(self):
        seeds = {derive_seed(5, r, p) for r in range(50) for p in (DISORDER, MAGNETIZATION)}
        assert len(seeds) == 100
        assert all(0 <= s < 2**64 for s in seeds)

    def test_derive_seed_deterministic(self):
        assert derive_seed(2**63 + 11, 3, MAGNETIZATION) == derive_seed(2**63 + 11, 3, MAGNETIZATION)

    def test_generator_deterministic(self):
        assert np.array_equal(generator(9).standard_normal(5), generator(9).standard_normal(5))


class TestDisorder:
    def test_deterministic(self):
        assert np.array_equal(sample_disorder(50, 3), sample_disorder(50, 3))

    def test_seed_matters(self):
        assert not np.array_equal(sample_disorder(50, 3), sample_disorder(50, 4))

    def test_rejects_small_n(self):
        with pytest.raises(ValueError):
            sample_disorder(1, 0)

    def test_moments(self):
        n = 2000
        g = sample_disorder(n, 11)
        assert abs(g.mean()) < 4 / n
        assert abs(g.var() - 1) < 0.01
        assert 0.9 <= np.mean(np.diagonal(g) ** 2) <= 1.1

    def test_symmetrize_pattern(self):
        g = np.arange(9.0).reshape(3, 3)
        gbar = symmetrize(g)
        assert np.array_equal(gbar, gbar.T)
        assert np.allclose(gbar, math.sqrt(2) * 0.5 * (g + g.T), atol=1e-15)

    def test_symmetrized_variances(self):
        gbar = symmetrize(sample_disorder(1000, 12))
        off = gbar[np.triu_indices(1000, 1)]
        assert abs(off.var() - 1) < 0.02
        assert abs(np.diagonal(gbar).var() - 2) < 0.3

    def test_goe_edge_and_semicircle(self):
        n = 1000
        m = symmetrize(sample_disorder(n, 13)) / math.sqrt(n)
        eig = np.linalg.eigvalsh(m)
        assert 1.85 <= eig[-1] <= 2.15
        assert ks_distance(EsdCurve(eig), semicircle_cdf) < 0.05


class TestInit:
    def test_first_state(self):
        g = sample_disorder(100, 1)
        s = amp_init(P, RS, g)
        assert s.k == 1
        assert inner(s.phis[0], s.phis[0]) == 1.0
        assert inner(s.m, s.m) == pytest.approx(RS.q, abs=1e-15)
        assert np.array_equal(s.g, g)
        assert s.g is not g

    def test_no_copy_aliases(self):
        g = sample_disorder(100, 1)
        s = amp_init(P, RS, g, copy=False)
        assert s.g is g

    def test_rejects_short_schedule(self):
        with pytest.raises(ValueError):
            amp_init(P, RS, sample_disorder(10, 1), k_max=1)


class TestStep:
    def test_orthonormal_after_one_step(self):
        s = amp_step(amp_init(P, RS, sample_disorder(300, 2)))
        assert s.k == 2
        assert orthonormality_error(s.phis) < 1e-10

    @settings(max_examples=10, deadline=None)
    @given(st.integers(50, 400), st.integers(0, 2**63), st.integers(2, 9))
    def test_invariants(self, n, seed, k):
        s = run_amp(P, RS, sample_disorder(n, seed), k)
        assert orthonormality_error(s.phis) < 1e-10
        assert np.all(np.abs(s.m) < 1)
        assert np.array_equal(s.m, np.tanh(s.field))

    def test_deflation_annihilates_used_directions(self):
        n = 500
        g = sample_disorder(n, 3)
        s = run_amp(P, RS, g, 7)
        # g^(k) annihilates phi^(1..k-1)
        for phi in s.phis[:-1]:
            assert np.linalg.norm(s.g @ phi) < 1e-8 * math.sqrt(n)
            assert np.linalg.norm(phi @ s.g) < 1e-8 * math.sqrt(n)

    def test_deflation_matches_explicit_formula(self):
        n = 60
        g = sample_disorder(n, 4)
        s1 = amp_init(P, RS, g)
        phi = s1.phis[0]
        xi = g @ phi / math.sqrt(n)
        eta = phi @ g / math.sqrt(n)
        c = inner(phi, xi)
        expected = g - (np.outer(xi, phi) + np.outer(phi, eta) - c * np.outer(phi, phi)) / math.sqrt(n)
        s2 = amp_step(s1)
        assert np.allclose(s2.g, expected, atol=1e-13)
        assert np.allclose(s2.zetas[0], (xi + eta) / math.sqrt(2), atol=1e-14)

    def test_field_update_formula(self):
        n = 80
        s = run_amp(P, RS, sample_disorder(n, 5), 4)
        gam = s.schedule.gammas
        expected = P.h + P.beta * (gam[0] * s.zetas[0] + gam[1] * s.zetas[1])
        expected = expected + P.beta * math.sqrt(s.schedule.remaining(RS.q, 2)) * s.zetas[2]
        assert np.allclose(s.field, expected, atol=1e-14)

    def test_deterministic(self):
        a = run_amp(P, RS, sample_disorder(200, 6), 6)
        b = run_amp(P, RS, sample_disorder(200, 6), 6)
        assert np.array_equal(a.m, b.m)

    def test_schedule_exhausted(self):
        s = amp_init(P, RS, sample_disorder(30, 1), k_max=2)
        s = amp_step(amp_step(s))
        with pytest.raises(ValueError):
            amp_step(s)

    def test_gram_schmidt_degenerate(self):
        # n = 2 cannot hold three orthonormal vectors
        s = amp_init(P, RS, sample_disorder(2, 1), k_max=5)
        with pytest.raises(GramSchmidtError):
            for _ in range(4):
                s = amp_step(s)

    def test_callback_sees_each_state(self):
        ks = []
        run_amp(P, RS, sample_disorder(40, 1), 5, callback=lambda s: ks.append(s.k))
        assert ks == [2, 3, 4, 5]


class TestProjection:
    def test_first(self):
        s = amp_init(P, RS, sample_disorder(20, 1))
        proj = projection_P(s)
        assert np.allclose(proj, np.full((20, 20), 1 / 20))
        assert np.trace(proj) == pytest.approx(1.0)

    def test_idempotent_rank(self):
        s = run_amp(P, RS, sample_disorder(200, 2), 6)
        proj = projection_P(s)
        assert np.linalg.norm(proj @ proj - proj) < 1e-8
        assert np.array_equal(proj, proj.T) or np.max(np.abs(proj - proj.T)) < 1e-10
        assert np.trace(proj) == pytest.approx(6, abs=1e-8)


class TestDiagnostics:
    def test_requires_two_steps(self):
        with pytest.raises(ValueError):
            diagnostics(amp_init(P, RS, sample_disorder(20, 1)))

    def test_gamma_overlaps(self):
        n, k = 2000, 6
        sched = None
        overlaps = []
        for r in range(20):
            s = run_amp(P, RS, sample_disorder(n, derive_seed(101, r)), k, copy=False)
            sched = s.schedule
            overlaps.append(diagnostics(s).gamma_overlaps)
        mean = np.mean(overlaps, axis=0)
        for s_idx in range(4):
            assert abs(mean[s_idx] - sched.gammas[s_idx]) < 0.03

    def test_phi_xi_variance(self):
        n = 500
        vals = [diagnostics(run_amp(P, RS, sample_disorder(n, derive_seed(202, r)), 3, copy=False)).phi_xi_overlap
                for r in range(200)]
        assert abs(np.var(vals, ddof=1) * n - 1) < 0.3

    def test_field_law(self):
        n = 4000
        s = run_amp(P, RS, sample_disorder(n, 303), 8, copy=False)
        sigma = P.beta * math.sqrt(RS.q)
        ks = ks_distance(EsdCurve(s.field), lambda x: ndtr((x - P.h) / sigma))
        assert ks < 0.05

    @pytest.mark.parametrize(
        "f",
        [np.tanh, lambda x: np.tanh(x) ** 2, lambda x: np.cosh(x) ** -4.0],
        ids=["tanh", "tanh2", "sech4"],
    )
    def test_state_evolution_averages(self, f):
        n, k, reps = 1000, 5, 30
        sigma = P.beta * math.sqrt(RS.q)
        target = default_rule()(lambda z: f(P.h + sigma * z))
        vals = [float(np.mean(f(run_amp(P, RS, sample_disorder(n, derive_seed(404, r)), k, copy=False).field)))
                for r in range(reps)]
        se = np.std(vals, ddof=1) / math.sqrt(reps)
        assert abs(np.mean(vals) - target) < 3 * se + 1e-12


def test_dump_state_csv(tmp_path):
    s = run_amp(P, RS, sample_disorder(10, 1), 3)
    path = tmp_path / "state.csv"
    dump_state_csv(s, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "i,m_k,h_k"
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.array_equal(data[:, 1], s.m)
    assert np.array_equal(data[:, 2], s.field)
