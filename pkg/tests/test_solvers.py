import numpy as np
import pytest

from shrinkda.solvers import (DENSE_FALLBACK_CAP, IsmfBreakdown, ObservationSpaceSystem,
                              diagonal_inverse, ensrf_transform, entkf_factors,
                              ismf_solve)


def random_spd(gen, n, lo=0.5, hi=2.0):
    q, _ = np.linalg.qr(gen.standard_normal((n, n)))
    return (q * gen.uniform(lo, hi, n)) @ q.T


class TestIsmfSolve:
    def test_no_update_is_plain_inverse(self):
        gen = np.random.default_rng(60)
        var = gen.uniform(0.5, 2.0, 12)
        rhs = gen.standard_normal((12, 3))
        z = ismf_solve(ObservationSpaceSystem(diagonal_inverse(var), np.zeros((12, 4)), rhs))
        np.testing.assert_array_equal(z, rhs / var[:, None])

    def test_rank_one_matches_sherman_morrison(self):
        gen = np.random.default_rng(61)
        n = 9
        gamma = random_spd(gen, n)
        inv = np.linalg.inv(gamma)
        v = gen.standard_normal((n, 1))
        d = gen.standard_normal(n)
        z = ismf_solve(ObservationSpaceSystem(lambda m: inv @ m, v, d))
        # classical rank-one update formula
        gd = inv @ d
        gv = inv @ v[:, 0]
        expected = gd - gv * (v[:, 0] @ gd) / (1.0 + v[:, 0] @ gv)
        np.testing.assert_allclose(z[:, 0], expected, rtol=0, atol=1e-12)

    def test_matches_dense_solve(self):
        gen = np.random.default_rng(62)
        n, m = 30, 6
        gamma = random_spd(gen, n)
        inv = np.linalg.inv(gamma)
        pi = gen.standard_normal((n, m))
        rhs = gen.standard_normal((n, 4))
        z = ismf_solve(ObservationSpaceSystem(lambda x: inv @ x, pi, rhs))
        expected = np.linalg.solve(gamma + pi @ pi.T, rhs)
        assert np.linalg.norm(z - expected) / np.linalg.norm(expected) < 1e-10

    def test_residual_large_instance(self):
        gen = np.random.default_rng(63)
        n, m = 2000, 100
        var = gen.uniform(0.5, 2.0, n)
        pi = gen.standard_normal((n, m))
        rhs = gen.standard_normal((n, 5))
        z = ismf_solve(ObservationSpaceSystem(diagonal_inverse(var), pi, rhs))
        resid = var[:, None] * z + pi @ (pi.T @ z) - rhs
        assert np.linalg.norm(resid) / np.linalg.norm(rhs) < 1e-8

    def test_column_permutation_property(self):
        gen = np.random.default_rng(64)
        n, m = 80, 10
        gamma = random_spd(gen, n)
        inv = np.linalg.inv(gamma)
        pi = gen.standard_normal((n, m))
        rhs = gen.standard_normal((n, 2))
        full = gamma + pi @ pi.T
        for _ in range(10):
            perm = gen.permutation(m)
            z = ismf_solve(ObservationSpaceSystem(lambda x: inv @ x, pi[:, perm], rhs))
            assert np.linalg.norm(full @ z - rhs) / np.linalg.norm(rhs) < 1e-8

    def test_breakdown_falls_back_to_dense(self):
        # an indefinite Gamma zeroes the first pivot 1 + v.T Gamma^{-1} v
        # while the full updated matrix stays invertible; the dense
        # fallback must still return the correct solution
        gamma = np.diag([1.0, -1.0])
        inv = np.linalg.inv(gamma)
        pi = np.array([[0.0, 0.0], [1.0, 2.0]])
        assert abs(1.0 + pi[:, 0] @ inv @ pi[:, 0]) < 1e-12
        rhs = np.array([1.0, 2.0])
        z = ismf_solve(ObservationSpaceSystem(lambda m: inv @ m, pi, rhs))
        np.testing.assert_allclose((gamma + pi @ pi.T) @ z[:, 0], rhs, atol=1e-12)

    def test_breakdown_beyond_cap_raises(self, monkeypatch):
        import shrinkda.solvers as solvers
        monkeypatch.setattr(solvers, "DENSE_FALLBACK_CAP", 1)
        gamma = np.diag([1.0, -1.0])
        inv = np.linalg.inv(gamma)
        pi = np.array([[0.0, 0.0], [1.0, 2.0]])
        with pytest.raises(IsmfBreakdown, match="ISMF breakdown"):
            ismf_solve(ObservationSpaceSystem(lambda m: inv @ m, pi, np.ones(2)))


class TestEnsrfTransform:
    def test_zero_v_is_identity(self):
        t = ensrf_transform(np.zeros((5, 3)), np.zeros((5, 3)))
        np.testing.assert_allclose(t, np.eye(3), atol=1e-14)

    def test_scalar_case(self):
        # V.T Z_V = [s] for a single member: transform is sqrt(1 - s)
        s = 0.64
        v = np.array([[1.0]])
        z = np.array([[s]])
        t = ensrf_transform(v, z)
        np.testing.assert_allclose(t, [[np.sqrt(1 - s)]], rtol=1e-14)

    def test_reconstruction(self):
        gen = np.random.default_rng(65)
        nobs, nens = 30, 6
        v = gen.standard_normal((nobs, nens))
        r = np.diag(gen.uniform(0.5, 1.5, nobs))
        z_v = np.linalg.solve(r + v @ v.T, v)
        t = ensrf_transform(v, z_v)
        target = np.eye(nens) - v.T @ z_v
        assert np.abs(t @ t.T - target).max() < 1e-9

    def test_symmetry_and_contraction(self):
        gen = np.random.default_rng(66)
        v = gen.standard_normal((40, 8))
        z_v = np.linalg.solve(np.eye(40) + v @ v.T, v)
        t = ensrf_transform(v, z_v)
        assert np.abs(t - t.T).max() < 1e-12
        assert np.linalg.norm(t, 2) <= 1.0 + 1e-10

    def test_non_contractive_rejected(self):
        # eigenvalue above one signals an inconsistent system
        v = np.array([[1.0]])
        z = np.array([[1.5]])
        with pytest.raises(ValueError, match="non-contractive"):
            ensrf_transform(v, z)


class TestEntkfFactors:
    def test_zero_v(self):
        factors = entkf_factors(np.zeros((6, 4)), np.ones(6))
        np.testing.assert_allclose(factors.transform, np.eye(4), atol=1e-14)
        np.testing.assert_allclose(factors.mean_weights(np.ones(6)), np.zeros(4), atol=1e-14)

    def test_transform_matches_inverse_sqrt(self):
        gen = np.random.default_rng(67)
        nobs, nens = 25, 5
        v = gen.standard_normal((nobs, nens))
        r_var = gen.uniform(0.5, 1.5, nobs)
        factors = entkf_factors(v, r_var)
        m = np.eye(nens) + v.T @ np.diag(1.0 / r_var) @ v
        eigval, eigvec = np.linalg.eigh(m)
        expected = (eigvec / np.sqrt(eigval)) @ eigvec.T
        np.testing.assert_allclose(factors.transform, expected, atol=1e-10)

    def test_mean_weights_match_gain(self):
        gen = np.random.default_rng(68)
        nobs, nens = 20, 6
        v = gen.standard_normal((nobs, nens))
        r_var = gen.uniform(0.5, 1.5, nobs)
        d = gen.standard_normal(nobs)
        factors = entkf_factors(v, r_var)
        expected = v.T @ np.linalg.solve(np.diag(r_var) + v @ v.T, d)
        np.testing.assert_allclose(factors.mean_weights(d), expected, atol=1e-10)

    def test_underdetermined_shape(self):
        # fewer observations than members still yields an exact transform
        gen = np.random.default_rng(69)
        v = gen.standard_normal((3, 7))
        r_var = np.full(3, 0.8)
        factors = entkf_factors(v, r_var)
        m = np.eye(7) + v.T @ np.diag(1.0 / r_var) @ v
        np.testing.assert_allclose(factors.transform @ factors.transform,
                                   np.linalg.inv(m), atol=1e-9)
