import numpy as np
import pytest

from shrinkda import filters
from shrinkda.ensemble import Ensemble, dense_sample_covariance, deviations, ensemble_mean
from shrinkda.filters import (AnalysisResult, enkf_analysis, enkf_du_analysis,
                              enkf_fs_analysis, enkf_n_analysis, enkf_n_cost,
                              enkf_n_gradient, enkf_rs_analysis, enkf_rs_system,
                              ensrf_analysis, entkf_analysis, localize_covariance,
                              run_filter)
from shrinkda.observations import ObservationSpec
from shrinkda.sampling import (RngStream, draw_synthetic_members, extend_ensemble,
                               perturb_observations)
from shrinkda.shrinkage import ShrinkageCovariance

from helpers import random_ensemble, selection_matrix


def instance(gen, nstate=10, nens=6, p=0.7, obs_std=0.1):
    ens = random_ensemble(gen, nstate, nens)
    obs = ObservationSpec.from_fraction(nstate, p, obs_std)
    truth = gen.standard_normal(nstate)
    y = obs.project(truth) + obs_std * gen.standard_normal(obs.nobs)
    return ens, obs, y


def kalman_gain(ens, obs):
    p = dense_sample_covariance(ens)
    h = selection_matrix(obs, ens.nstate)
    r = np.diag(obs.variances)
    return p @ h.T @ np.linalg.inv(r + h @ p @ h.T)


class TestEnkf:
    def test_zero_innovation_injection(self):
        gen = np.random.default_rng(70)
        ens, obs, y = instance(gen)
        res = enkf_analysis(ens, y, obs, innovations=np.zeros((obs.nobs, ens.nens)))
        np.testing.assert_array_equal(res.analysis.matrix, ens.matrix)

    def test_huge_variances_vanishing_gain(self):
        gen = np.random.default_rng(71)
        nstate = 12
        ens = random_ensemble(gen, nstate, 5)
        obs = ObservationSpec(nstate=nstate, indices=np.arange(8),
                              variances=np.full(8, 1e6))
        y = gen.standard_normal(8)
        res = enkf_analysis(ens, y, obs, RngStream(3))
        rel = (np.linalg.norm(res.analysis.matrix - ens.matrix)
               / np.linalg.norm(ens.matrix))
        assert rel < 1e-3

    def test_matches_dense_gain_per_member(self):
        gen = np.random.default_rng(72)
        ens, obs, y = instance(gen, nstate=8, nens=4, p=5 / 8)
        rng = RngStream(17)
        res = enkf_analysis(ens, y, obs, rng)
        perturbed = perturb_observations(y, obs, ens.nens, rng.child(1))
        d = perturbed - obs.project(ens.matrix)
        oracle = ens.matrix + kalman_gain(ens, obs) @ d
        assert np.abs(res.analysis.matrix - oracle).max() < 1e-9


class TestEnsrf:
    def test_zero_innovation_mean_fixed(self):
        gen = np.random.default_rng(73)
        ens, obs, _ = instance(gen)
        mean = ensemble_mean(ens)
        res = ensrf_analysis(ens, obs.project(mean), obs)
        np.testing.assert_allclose(ensemble_mean(res.analysis), mean, atol=1e-13)

    def test_covariance_matches_kalman_oracle(self):
        gen = np.random.default_rng(74)
        ens, obs, y = instance(gen, nstate=10, nens=6)
        res = ensrf_analysis(ens, y, obs)
        h = selection_matrix(obs, 10)
        p = dense_sample_covariance(ens)
        target = (np.eye(10) - kalman_gain(ens, obs) @ h) @ p
        got = dense_sample_covariance(res.analysis)
        assert np.abs(got - target).max() < 1e-8

    def test_equals_entkf(self):
        gen = np.random.default_rng(75)
        ens, obs, y = instance(gen, nstate=20, nens=7)
        a = ensrf_analysis(ens, y, obs)
        b = entkf_analysis(ens, y, obs)
        assert np.abs(ensemble_mean(a.analysis) - ensemble_mean(b.analysis)).max() < 1e-8
        pa = dense_sample_covariance(a.analysis)
        pb = dense_sample_covariance(b.analysis)
        assert np.abs(pa - pb).max() < 1e-8

    def test_deterministic(self):
        gen = np.random.default_rng(76)
        ens, obs, y = instance(gen)
        a = ensrf_analysis(ens, y, obs).analysis.matrix
        b = ensrf_analysis(ens, y, obs).analysis.matrix
        np.testing.assert_array_equal(a, b)


class TestEntkf:
    def test_zero_innovation_mean_fixed(self):
        gen = np.random.default_rng(77)
        ens, obs, _ = instance(gen)
        mean = ensemble_mean(ens)
        res = entkf_analysis(ens, obs.project(mean), obs)
        np.testing.assert_allclose(ensemble_mean(res.analysis), mean, atol=1e-13)

    def test_covariance_matches_kalman_oracle(self):
        gen = np.random.default_rng(78)
        ens, obs, y = instance(gen, nstate=9, nens=5)
        res = entkf_analysis(ens, y, obs)
        h = selection_matrix(obs, 9)
        p = dense_sample_covariance(ens)
        target = (np.eye(9) - kalman_gain(ens, obs) @ h) @ p
        assert np.abs(dense_sample_covariance(res.analysis) - target).max() < 1e-8


class TestEnkfN:
    def test_cost_at_zero_weights(self):
        gen = np.random.default_rng(79)
        ens, obs, y = instance(gen)
        u = (ens.matrix - ensemble_mean(ens)[:, None])
        q = obs.project(u)
        d0 = y - obs.project(ensemble_mean(ens))
        rinv = 1.0 / obs.variances
        got = enkf_n_cost(np.zeros(ens.nens), q, d0, rinv, ens.nens)
        expected = 0.5 * d0 @ (rinv * d0) + 0.5 * ens.nens * np.log(1 + 1 / ens.nens)
        np.testing.assert_allclose(got, expected, rtol=1e-14)

    def test_gradient_matches_finite_differences(self):
        gen = np.random.default_rng(80)
        ens, obs, y = instance(gen, nstate=12, nens=5)
        u = (ens.matrix - ensemble_mean(ens)[:, None])
        q = obs.project(u)
        d0 = y - obs.project(ensemble_mean(ens))
        rinv = 1.0 / obs.variances
        args = (q, d0, rinv, ens.nens)
        h = 1e-6
        for _ in range(10):
            w = gen.standard_normal(ens.nens)
            grad = enkf_n_gradient(w, *args)
            fd = np.empty_like(w)
            for j in range(w.shape[0]):
                e = np.zeros_like(w)
                e[j] = h
                fd[j] = (enkf_n_cost(w + e, *args) - enkf_n_cost(w - e, *args)) / (2 * h)
            assert np.abs(grad - fd).max() < 1e-6 * max(1.0, np.abs(grad).max())

    def test_mean_preserved_and_diagnostics(self):
        gen = np.random.default_rng(81)
        ens, obs, y = instance(gen)
        res = enkf_n_analysis(ens, y, obs)
        assert res.analysis.nens == ens.nens
        assert "cost_primal" in res.diagnostics
        assert res.diagnostics["gradient_norm"] <= 1e-8

    def test_non_convergence_reports_iterate(self):
        gen = np.random.default_rng(117)
        ens, obs, y = instance(gen)
        with pytest.raises(RuntimeError, match="gradient norm"):
            enkf_n_analysis(ens, y, obs, grad_tol=0.0)


class TestEnkfDu:
    def test_upper_bound_admissible(self):
        gen = np.random.default_rng(82)
        ens, obs, y = instance(gen)
        res = enkf_du_analysis(ens, y, obs)
        nens = ens.nens
        upper = nens / (1 + 1 / nens)
        assert 0.0 < res.diagnostics["dual_zeta"] <= upper + 1e-12
        assert np.isfinite(res.diagnostics["cost_dual"])

    def test_zeta_matches_grid_search(self):
        gen = np.random.default_rng(83)
        ens, obs, y = instance(gen, nstate=15, nens=6)
        res = enkf_du_analysis(ens, y, obs)
        # independent grid-search oracle over the dual cost
        u = (ens.matrix - ensemble_mean(ens)[:, None])
        q = obs.project(u)
        d0 = y - obs.project(ensemble_mean(ens))
        g = q / np.sqrt(obs.variances)[:, None]
        dw = d0 / np.sqrt(obs.variances)
        nens = ens.nens
        eps_n = 1 + 1 / nens

        def dual(z):
            quad = dw @ dw - dw @ g @ np.linalg.solve(z * np.eye(nens) + g.T @ g, g.T @ dw)
            return 0.5 * quad + 0.5 * z * eps_n + 0.5 * nens * np.log(nens / z) - 0.5 * nens

        zs = np.linspace(1e-8, nens / eps_n, 10_000)
        costs = np.array([dual(z) for z in zs])
        best = zs[np.argmin(costs)]
        cell = zs[1] - zs[0]
        assert abs(res.diagnostics["dual_zeta"] - best) <= cell
        assert abs(res.diagnostics["cost_dual"] - costs.min()) < 1e-6

    def test_duality_gap(self):
        gen = np.random.default_rng(84)
        for _ in range(5):
            ens, obs, y = instance(gen, nstate=14, nens=5)
            primal = enkf_n_analysis(ens, y, obs)
            dual = enkf_du_analysis(ens, y, obs)
            gap = abs(primal.diagnostics["cost_primal"] - dual.diagnostics["cost_dual"])
            assert gap < 1e-4


class TestEnkfFs:
    def test_zero_innovation_injection(self):
        gen = np.random.default_rng(85)
        ens, obs, y = instance(gen, nens=5)
        res = enkf_fs_analysis(ens, y, obs, 4, RngStream(1),
                               innovations=np.zeros((obs.nobs, ens.nens)))
        np.testing.assert_array_equal(res.analysis.matrix, ens.matrix)

    def test_reduces_to_enkf_without_shrinkage(self):
        # k = 0 with phi forced to 0 and delta to 1 is the classic update
        gen = np.random.default_rng(86)
        ens, obs, y = instance(gen, nstate=9, nens=4)
        rng = RngStream(55)
        plain = enkf_analysis(ens, y, obs, rng)
        forced = ShrinkageCovariance(mu=1.0, gamma=0.0, phi=0.0, delta=1.0,
                                     deviations=deviations(ens))
        res = enkf_fs_analysis(ens, y, obs, 0, rng, shrinkage=forced)
        assert np.abs(res.analysis.matrix - plain.analysis.matrix).max() < 1e-10

    def test_matches_dense_full_space_oracle(self):
        gen = np.random.default_rng(87)
        nstate, nens, k = 12, 4, 6
        ens = random_ensemble(gen, nstate, nens)
        obs = ObservationSpec.from_fraction(nstate, 0.75, 0.1)
        y = gen.standard_normal(obs.nobs)
        rng = RngStream(7)
        res = enkf_fs_analysis(ens, y, obs, k, rng)
        # rebuild every ingredient independently from the same streams
        cov = ShrinkageCovariance.from_ensemble(ens)
        perturbed = perturb_observations(y, obs, nens, rng.child(1))
        d = perturbed - obs.project(ens.matrix)
        synthetic = draw_synthetic_members(ensemble_mean(ens), cov, k, rng.child(2))
        ext = extend_ensemble(ens, synthetic)
        sdev = ext.scaled_deviations()
        bhat = cov.phi * np.eye(nstate) + cov.delta * (sdev @ sdev.T)
        h = selection_matrix(obs, nstate)
        r = np.diag(obs.variances)
        oracle = ens.matrix + bhat @ h.T @ np.linalg.solve(r + h @ bhat @ h.T, d)
        assert np.abs(res.analysis.matrix - oracle).max() < 1e-9

    def test_objective_decreases(self):
        gen = np.random.default_rng(88)
        ens, obs, y = instance(gen, nstate=15, nens=6, p=0.8)
        rng = RngStream(13)
        k = 9
        res = enkf_fs_analysis(ens, y, obs, k, rng)
        cov = ShrinkageCovariance.from_ensemble(ens)
        perturbed = perturb_observations(y, obs, ens.nens, rng.child(1))
        synthetic = draw_synthetic_members(ensemble_mean(ens), cov, k, rng.child(2))
        sdev = extend_ensemble(ens, synthetic).scaled_deviations()
        bhat = cov.phi * np.eye(15) + cov.delta * (sdev @ sdev.T)
        data = perturbed.mean(axis=1)
        mean_b = ensemble_mean(ens)

        def objective(x):
            dx = x - mean_b
            dy = data - obs.project(x)
            return 0.5 * dx @ np.linalg.solve(bhat, dx) + 0.5 * dy @ (dy / obs.variances)

        assert objective(ensemble_mean(res.analysis)) <= objective(mean_b) * (1 + 1e-12)

    def test_requires_three_members(self):
        gen = np.random.default_rng(89)
        ens, obs, y = instance(gen, nens=2)
        with pytest.raises(ValueError, match="too few members"):
            enkf_fs_analysis(ens, y, obs, 2, RngStream(1))


class TestEnkfRs:
    def test_zero_innovation_injection(self):
        gen = np.random.default_rng(90)
        ens, obs, y = instance(gen, nens=5)
        res = enkf_rs_analysis(ens, y, obs, 4, RngStream(2),
                               innovations=np.zeros((obs.nobs, ens.nens)))
        assert np.abs(res.analysis.matrix - ens.matrix).max() < 1e-12

    def test_matches_dense_normal_equations(self):
        gen = np.random.default_rng(91)
        nstate, nens, k = 12, 4, 6
        ens = random_ensemble(gen, nstate, nens)
        obs = ObservationSpec.from_fraction(nstate, 0.75, 0.1)
        y = gen.standard_normal(obs.nobs)
        rng = RngStream(21)
        res = enkf_rs_analysis(ens, y, obs, k, rng)
        cov = ShrinkageCovariance.from_ensemble(ens)
        perturbed = perturb_observations(y, obs, nens, rng.child(1))
        d = perturbed - obs.project(ens.matrix)
        synthetic = draw_synthetic_members(ensemble_mean(ens), cov, k, rng.child(2))
        ext = extend_ensemble(ens, synthetic)
        u = ext.anomalies()
        s = cov.deviations.columns
        bhat = cov.phi * np.eye(nstate) + cov.delta * (s @ s.T)
        h = selection_matrix(obs, nstate)
        r_inv = np.diag(1.0 / obs.variances)
        q = h @ u
        w = u.T @ np.linalg.solve(bhat, u) + q.T @ r_inv @ q
        lam = np.linalg.pinv(w) @ (q.T @ r_inv @ d)
        oracle = ens.matrix + u @ lam
        assert np.abs(res.analysis.matrix - oracle).max() < 1e-8

    def test_projection_identity_two_ways(self):
        gen = np.random.default_rng(92)
        nstate, nens, k = 12, 4, 6
        ens = random_ensemble(gen, nstate, nens)
        obs = ObservationSpec.from_fraction(nstate, 0.75, 0.1)
        cov = ShrinkageCovariance.from_ensemble(ens)
        synthetic = draw_synthetic_members(ensemble_mean(ens), cov, k, RngStream(4))
        ext = extend_ensemble(ens, synthetic)
        w_fast, q_ext = enkf_rs_system(ens, cov, ext, obs)
        # dense evaluation of the projected weighted covariance
        u = ext.anomalies()
        s = cov.deviations.columns
        bhat = cov.phi * np.eye(nstate) + cov.delta * (s @ s.T)
        h = selection_matrix(obs, nstate)
        w_dense = u.T @ (np.linalg.inv(bhat) + h.T @ np.diag(1.0 / obs.variances) @ h) @ u
        assert np.abs(w_fast - w_dense).max() < 1e-8 * max(1.0, np.abs(w_dense).max())

    def test_equals_full_space_on_spanning_basis(self):
        # nens > nstate with k = 0: the anomaly basis spans the whole space
        gen = np.random.default_rng(93)
        ens = random_ensemble(gen, 8, 9)
        obs = ObservationSpec.from_fraction(8, 0.75, 0.1)
        y = gen.standard_normal(obs.nobs)
        rng = RngStream(31)
        fs = enkf_fs_analysis(ens, y, obs, 0, rng).analysis.matrix
        rs = enkf_rs_analysis(ens, y, obs, 0, rng).analysis.matrix
        assert np.abs(fs - rs).max() < 1e-6 * max(1.0, np.abs(fs).max())

    def test_condition_estimate_reported(self):
        gen = np.random.default_rng(94)
        ens, obs, y = instance(gen, nens=4)
        res = enkf_rs_analysis(ens, y, obs, 3, RngStream(5))
        assert res.diagnostics["condition_estimate"] >= 1.0

    def test_zero_basis_rank_deficient_error(self):
        # identical members with a forced shrinkage leave an all-zero basis
        v = np.arange(6.0)
        ens = Ensemble.from_members([v, v, v, v])
        obs = ObservationSpec.from_fraction(6, 0.5, 0.1)
        forced = ShrinkageCovariance(mu=1.0, gamma=1.0, phi=1.0, delta=0.0,
                                     deviations=deviations(ens))
        with pytest.raises(ValueError, match="rank-deficient ensemble space"):
            enkf_rs_analysis(ens, obs.project(v), obs, 0, RngStream(2),
                             shrinkage=forced)


class TestLocalizeCovariance:
    def test_infinite_radius_identity(self):
        gen = np.random.default_rng(95)
        p = gen.standard_normal((6, 6))
        p = p @ p.T
        out = localize_covariance(p, lambda i, j: np.abs(i - j).astype(float), 1e12)
        assert np.abs(out - p).max() < 1e-12 * np.abs(p).max()

    def test_diagonal_unchanged(self):
        gen = np.random.default_rng(96)
        p = gen.standard_normal((5, 5))
        out = localize_covariance(p, lambda i, j: np.abs(i - j).astype(float), 1.0)
        np.testing.assert_array_equal(np.diag(out), np.diag(p))

    def test_distance_equal_radius_factor(self):
        p = np.ones((3, 3))
        out = localize_covariance(p, lambda i, j: np.abs(i - j).astype(float), 1.0)
        np.testing.assert_allclose(out[0, 1], np.exp(-0.5), rtol=1e-12)


class TestRegistryAndInvariants:
    def test_unknown_key(self):
        gen = np.random.default_rng(97)
        ens, obs, y = instance(gen)
        with pytest.raises(ValueError, match="unknown filter key"):
            run_filter("enkf-xyz", ens, y, obs)

    @pytest.mark.parametrize("key", filters.FILTER_KEYS)
    def test_member_count_preserved(self, key):
        gen = np.random.default_rng(98)
        ens, obs, y = instance(gen, nens=5)
        res = run_filter(key, ens, y, obs, RngStream(8), synthetic_members=4)
        assert isinstance(res, AnalysisResult)
        assert res.analysis.nens == ens.nens

    @pytest.mark.parametrize("key", filters.FILTER_KEYS)
    def test_reproducible_under_fixed_stream(self, key):
        gen = np.random.default_rng(99)
        ens, obs, y = instance(gen, nens=5)
        a = run_filter(key, ens, y, obs, RngStream(8), synthetic_members=4)
        b = run_filter(key, ens, y, obs, RngStream(8), synthetic_members=4)
        np.testing.assert_array_equal(a.analysis.matrix, b.analysis.matrix)
