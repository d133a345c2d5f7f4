"""Analysis steps for the seven ensemble filters.

Stochastic EnKF, the square-root pair (EnSRF / transform), the
inflation-free primal/dual pair, and the two shrinkage-based filters that
assimilate with an extended ensemble: full-space (observation-space
weighted covariance) and reduced-space (ensemble-space weighted
covariance).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .ensemble import Ensemble, anomalies, deviations, ensemble_mean
from .observations import ObservationSpec
from .sampling import RngStream, draw_synthetic_members, extend_ensemble, perturb_observations
from .shrinkage import (ShrinkageCovariance, apply_inverse_shrunk_covariance,
                        deviation_singular_values, rblw_parameters)
from .solvers import (ObservationSpaceSystem, diagonal_inverse, ensrf_transform,
                      entkf_factors, ismf_solve)

FILTER_KEYS = ("enkf", "ensrf", "entkf", "enkf-n", "enkf-du", "enkf-fs", "enkf-rs")

# Substream purposes used by the stochastic filters, so that two filters
# fed the same stream draw the same perturbed observations.
_OBS_STREAM = 1
_SYNTH_STREAM = 2


@dataclass(frozen=True)
class AnalysisResult:
    """Analysis ensemble plus per-step diagnostics.

    The analysis always has the same member count as the background; the
    synthetic members used internally by the shrinkage filters never
    appear in the output.
    """

    analysis: Ensemble
    diagnostics: dict = field(default_factory=dict)


def _check_inputs(bg: Ensemble, y: np.ndarray, obs: ObservationSpec) -> np.ndarray:
    if bg.nens < 2:
        raise ValueError("degenerate ensemble")
    if obs.nstate != bg.nstate:
        raise ValueError("observation spec does not match the state dimension")
    y = np.asarray(y, dtype=float)
    if y.shape != (obs.nobs,):
        raise ValueError("observation vector length must equal nobs")
    return y


def _innovation_matrix(bg, y, obs, rng):
    """Per-member innovations y_i^s - H x_i with perturbed observations."""
    if rng is None:
        raise ValueError("a random stream is required to perturb observations")
    perturbed = perturb_observations(y, obs, bg.nens, rng.child(_OBS_STREAM))
    return perturbed - obs.project(bg.matrix)


def _symmetric_sqrt_of_scaled_inverse(matrix: np.ndarray, scale: float) -> np.ndarray:
    """Symmetric square root of scale * matrix^{-1} for SPD ``matrix``."""
    sym = 0.5 * (matrix + matrix.T)
    eigval, eigvec = np.linalg.eigh(sym)
    if eigval[0] <= 0.0:
        raise ValueError("weight matrix is not positive definite")
    return (eigvec * np.sqrt(scale / eigval)) @ eigvec.T


def enkf_analysis(bg: Ensemble, y, obs: ObservationSpec,
                  rng: RngStream | None = None, *,
                  innovations: np.ndarray | None = None) -> AnalysisResult:
    """Stochastic EnKF step: each member assimilates its own perturbed data.

    The observation-space system (R + V V.T) Z = D is solved by the
    Sherman-Morrison recursion; ``innovations`` may inject a fixed D for
    testing.
    """
    y = _check_inputs(bg, y, obs)
    s = deviations(bg).columns
    v = obs.project(s)
    d = _innovation_matrix(bg, y, obs, rng) if innovations is None else np.asarray(innovations, dtype=float)
    z = ismf_solve(ObservationSpaceSystem(diagonal_inverse(obs.variances), v, d))
    analysis = bg.matrix + s @ (v.T @ z)
    return AnalysisResult(Ensemble(analysis), {"solver_iterations": float(bg.nens)})


def ensrf_analysis(bg: Ensemble, y, obs: ObservationSpec) -> AnalysisResult:
    """Deterministic square-root step.

    The mean moves by the standard gain; the anomalies are contracted by
    the symmetric square root of I - V.T (R + V V.T)^{-1} V.
    """
    y = _check_inputs(bg, y, obs)
    mean = ensemble_mean(bg)
    s = deviations(bg).columns
    u = anomalies(bg).columns
    v = obs.project(s)
    innovation = y - obs.project(mean)
    rhs = np.column_stack([innovation, v])
    z = ismf_solve(ObservationSpaceSystem(diagonal_inverse(obs.variances), v, rhs))
    mean_a = mean + s @ (v.T @ z[:, 0])
    transform = ensrf_transform(v, z[:, 1:])
    analysis = mean_a[:, None] + u @ transform
    return AnalysisResult(Ensemble(analysis))


def entkf_analysis(bg: Ensemble, y, obs: ObservationSpec) -> AnalysisResult:
    """Deterministic transform step; equivalent to :func:`ensrf_analysis`.

    Works through the singular value decomposition of the whitened
    observed deviations instead of an observation-space solve.
    """
    y = _check_inputs(bg, y, obs)
    mean = ensemble_mean(bg)
    s = deviations(bg).columns
    u = anomalies(bg).columns
    v = obs.project(s)
    factors = entkf_factors(v, obs.variances)
    mean_a = mean + s @ factors.mean_weights(y - obs.project(mean))
    analysis = mean_a[:, None] + u @ factors.transform
    return AnalysisResult(Ensemble(analysis))


def _enkf_n_pieces(bg, y, obs):
    mean = ensemble_mean(bg)
    u = anomalies(bg).columns
    q = obs.project(u)
    d0 = y - obs.project(mean)
    rinv = 1.0 / obs.variances
    eps_n = 1.0 + 1.0 / bg.nens
    return mean, u, q, d0, rinv, eps_n


def enkf_n_cost(w, q, d0, rinv, nens):
    """Primal finite-size cost at ensemble-space weights w."""
    res = d0 - q @ w
    return 0.5 * res @ (rinv * res) + 0.5 * nens * np.log(1.0 + 1.0 / nens + w @ w)


def enkf_n_gradient(w, q, d0, rinv, nens):
    res = d0 - q @ w
    return -q.T @ (rinv * res) + nens * w / (1.0 + 1.0 / nens + w @ w)


def enkf_n_hessian(w, q, rinv, nens):
    a = 1.0 + 1.0 / nens + w @ w
    return (q.T * rinv) @ q + nens * (a * np.eye(w.shape[0]) - 2.0 * np.outer(w, w)) / a**2


def enkf_n_analysis(bg: Ensemble, y, obs: ObservationSpec, *,
                    grad_tol: float = 1e-8, max_iter: int = 200) -> AnalysisResult:
    """Finite-size (primal, inflation-free) step.

    The ensemble-space weights minimize the finite-size cost by
    quasi-Newton iteration with the analytic gradient, polished by Newton
    steps with the analytic Hessian; the analysis ensemble is built from
    the inverse Hessian at the optimum.
    """
    y = _check_inputs(bg, y, obs)
    mean, u, q, d0, rinv, _ = _enkf_n_pieces(bg, y, obs)
    nens = bg.nens
    args = (q, d0, rinv, nens)

    result = minimize(enkf_n_cost, np.zeros(nens), args=args,
                      jac=enkf_n_gradient, method="BFGS",
                      options={"gtol": grad_tol, "maxiter": max_iter})
    w = result.x
    grad = enkf_n_gradient(w, *args)
    newton_steps = 0
    while np.linalg.norm(grad) > grad_tol and newton_steps < 50:
        step = np.linalg.solve(enkf_n_hessian(w, q, rinv, nens), grad)
        # halve until the cost does not increase
        alpha, base = 1.0, enkf_n_cost(w, *args)
        while alpha > 1e-8 and enkf_n_cost(w - alpha * step, *args) > base:
            alpha *= 0.5
        w = w - alpha * step
        grad = enkf_n_gradient(w, *args)
        newton_steps += 1
    grad_norm = float(np.linalg.norm(grad))
    if grad_norm > grad_tol * max(1.0, 1e4):
        raise RuntimeError(
            f"finite-size optimizer did not converge: gradient norm {grad_norm:.3e}, "
            f"last iterate norm {np.linalg.norm(w):.3e}")

    mean_a = mean + u @ w
    transform = _symmetric_sqrt_of_scaled_inverse(enkf_n_hessian(w, q, rinv, nens),
                                                  nens - 1.0)
    analysis = mean_a[:, None] + u @ transform
    cost = enkf_n_cost(w, *args)
    return AnalysisResult(Ensemble(analysis), {
        "cost_primal": float(cost),
        "gradient_norm": grad_norm,
        "solver_iterations": float(result.nit + newton_steps),
    })


def enkf_du_analysis(bg: Ensemble, y, obs: ObservationSpec, *,
                     xtol: float = 1e-10, zeta_min: float = 1e-8) -> AnalysisResult:
    """Dual (one-dimensional) counterpart of the finite-size step.

    The dual cost is minimized over zeta in (0, nens / (1 + 1/nens)] by
    bounded golden-section/parabolic search; the mean and ensemble follow
    from the regularized ensemble-space system at the optimal zeta.
    """
    y = _check_inputs(bg, y, obs)
    mean, u, q, d0, rinv, eps_n = _enkf_n_pieces(bg, y, obs)
    nens = bg.nens

    g = q * np.sqrt(rinv)[:, None]
    dw = d0 * np.sqrt(rinv)
    lam, vec = np.linalg.eigh(g.T @ g)
    lam = np.clip(lam, 0.0, None)
    proj = vec.T @ (g.T @ dw)
    base = float(dw @ dw)
    zeta_max = nens / eps_n

    def dual_cost(zeta):
        quad = base - np.sum(proj**2 / (zeta + lam))
        return 0.5 * quad + 0.5 * zeta * eps_n + 0.5 * nens * np.log(nens / zeta) - 0.5 * nens

    result = minimize_scalar(dual_cost, bounds=(zeta_min, zeta_max),
                             method="bounded", options={"xatol": xtol})
    if not result.success:
        raise RuntimeError(
            f"dual optimizer failed on bracket ({zeta_min:.3e}, {zeta_max:.3e}): {result.message}")
    zeta = float(result.x)

    w = vec @ (proj / (lam + zeta))
    mean_a = mean + u @ w
    weight_matrix = (vec * (lam + zeta)) @ vec.T
    transform = _symmetric_sqrt_of_scaled_inverse(weight_matrix, nens - 1.0)
    analysis = mean_a[:, None] + u @ transform
    return AnalysisResult(Ensemble(analysis), {
        "dual_zeta": zeta,
        "cost_dual": float(dual_cost(zeta)),
        "solver_iterations": float(result.nfev),
    })


def _estimate_shrinkage(bg: Ensemble) -> ShrinkageCovariance:
    devs = deviations(bg)
    svals = deviation_singular_values(devs)
    mu, gamma, phi, delta = rblw_parameters(svals, bg.nstate, bg.nens)
    return ShrinkageCovariance(mu=mu, gamma=gamma, phi=phi, delta=delta, deviations=devs)


def _shrinkage_diagnostics(cov: ShrinkageCovariance) -> dict:
    return {"mu": cov.mu, "gamma": cov.gamma, "phi": cov.phi, "delta": cov.delta}


def enkf_fs_analysis(bg: Ensemble, y, obs: ObservationSpec, k: int,
                     rng: RngStream | None = None, *,
                     shrinkage: ShrinkageCovariance | None = None,
                     innovations: np.ndarray | None = None) -> AnalysisResult:
    """Full-space shrinkage step with an extended ensemble.

    The background covariance estimate phi*I + delta*S@S.T comes from the
    real members only; k synthetic draws widen the deviation basis, the
    observation-space system (Gamma + Pi Pi.T) Z = D with Gamma = R + phi*I
    on the observed rows is solved by Sherman-Morrison, and only the real
    members are updated. ``shrinkage``/``innovations`` are testing hooks
    that bypass estimation and observation perturbation.
    """
    y = _check_inputs(bg, y, obs)
    if shrinkage is None and bg.nens < 3:
        raise ValueError("too few members for RBLW")
    cov = shrinkage if shrinkage is not None else _estimate_shrinkage(bg)
    d = _innovation_matrix(bg, y, obs, rng) if innovations is None else np.asarray(innovations, dtype=float)
    synthetic = draw_synthetic_members(ensemble_mean(bg), cov, int(k),
                                       rng.child(_SYNTH_STREAM) if rng is not None else RngStream(0))
    extended = extend_ensemble(bg, synthetic)

    basis = np.sqrt(cov.delta) * extended.scaled_deviations()
    pi = obs.project(basis)
    gamma_diag = obs.variances + cov.phi
    z = ismf_solve(ObservationSpaceSystem(diagonal_inverse(gamma_diag), pi, d))
    analysis = bg.matrix + basis @ (pi.T @ z) + cov.phi * obs.scatter(z)
    diag = _shrinkage_diagnostics(cov)
    diag["solver_iterations"] = float(extended.nk)
    return AnalysisResult(Ensemble(analysis), diag)


def enkf_rs_system(bg: Ensemble, cov: ShrinkageCovariance, extended, obs: ObservationSpec):
    """Ensemble-space weighted covariance and projected data operator.

    Returns (w_ens, q_ext) with w_ens = U.T (Bhat^{-1} + H.T R^{-1} H) U
    evaluated matrix-free and q_ext = H U, for the extended anomaly basis U.
    """
    u_ext = extended.anomalies()
    q_ext = obs.project(u_ext)
    z_bu = apply_inverse_shrunk_covariance(cov, u_ext)
    w_ens = u_ext.T @ z_bu + q_ext.T @ (q_ext / obs.variances[:, None])
    return 0.5 * (w_ens + w_ens.T), q_ext


def _pseudo_solve_psd(matrix: np.ndarray, rhs: np.ndarray, rcond: float = 1e-12):
    """Minimum-norm solve of a symmetric PSD system via eigenvalue truncation.

    The ensemble-space weight matrix is structurally rank deficient (the
    real anomalies sum to zero), but the system is consistent, so the
    truncated solution leaves the analysis unchanged.
    """
    eigval, eigvec = np.linalg.eigh(matrix)
    cutoff = rcond * max(eigval[-1], 0.0)
    kept = eigval > cutoff
    if not np.any(kept):
        raise ValueError(
            f"rank-deficient ensemble space: largest eigenvalue {eigval[-1]:.3e}")
    cond = float(eigval[-1] / eigval[kept].min())
    coeff = eigvec[:, kept].T @ rhs
    return eigvec[:, kept] @ (coeff / eigval[kept][:, None]), cond


def enkf_rs_analysis(bg: Ensemble, y, obs: ObservationSpec, k: int,
                     rng: RngStream | None = None, *,
                     shrinkage: ShrinkageCovariance | None = None,
                     innovations: np.ndarray | None = None) -> AnalysisResult:
    """Reduced-space shrinkage step: assimilate in the extended ensemble span.

    Per-member weights solve the normal equations of the ensemble-space
    variational problem with the shrinkage prior, using the Woodbury
    identity for Bhat^{-1} applied to the basis; the analysis is
    X^b + U @ lambda and synthetic members are discarded.
    """
    y = _check_inputs(bg, y, obs)
    if shrinkage is None and bg.nens < 3:
        raise ValueError("too few members for RBLW")
    cov = shrinkage if shrinkage is not None else _estimate_shrinkage(bg)
    d = _innovation_matrix(bg, y, obs, rng) if innovations is None else np.asarray(innovations, dtype=float)
    synthetic = draw_synthetic_members(ensemble_mean(bg), cov, int(k),
                                       rng.child(_SYNTH_STREAM) if rng is not None else RngStream(0))
    extended = extend_ensemble(bg, synthetic)

    w_ens, q_ext = enkf_rs_system(bg, cov, extended, obs)
    rhs = q_ext.T @ (d / obs.variances[:, None])
    lam, cond = _pseudo_solve_psd(w_ens, rhs)
    analysis = bg.matrix + extended.anomalies() @ lam
    diag = _shrinkage_diagnostics(cov)
    diag["condition_estimate"] = cond
    return AnalysisResult(Ensemble(analysis), diag)


def localize_covariance(p: np.ndarray, grid_distance, radius: float) -> np.ndarray:
    """Taper a dense covariance by a Gaussian distance correlation.

    Entry (i, j) is multiplied by exp(-d(i, j)^2 / (2 * radius^2));
    diagnostic/baseline use only. ``grid_distance`` must broadcast over
    integer index arrays.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("covariance must be square")
    if radius <= 0.0:
        raise ValueError("localization radius must be positive")
    idx = np.arange(p.shape[0])
    dist = np.asarray(grid_distance(idx[:, None], idx[None, :]), dtype=float)
    return p * np.exp(-(dist**2) / (2.0 * radius**2))


def run_filter(key: str, bg: Ensemble, y, obs: ObservationSpec,
               rng: RngStream | None = None, synthetic_members: int = 0) -> AnalysisResult:
    """Dispatch one analysis step by filter key.

    ``synthetic_members`` only affects the shrinkage filters; deterministic
    filters ignore ``rng``.
    """
    if key == "enkf":
        return enkf_analysis(bg, y, obs, rng)
    if key == "ensrf":
        return ensrf_analysis(bg, y, obs)
    if key == "entkf":
        return entkf_analysis(bg, y, obs)
    if key == "enkf-n":
        return enkf_n_analysis(bg, y, obs)
    if key == "enkf-du":
        return enkf_du_analysis(bg, y, obs)
    if key == "enkf-fs":
        return enkf_fs_analysis(bg, y, obs, synthetic_members, rng)
    if key == "enkf-rs":
        return enkf_rs_analysis(bg, y, obs, synthetic_members, rng)
    raise ValueError(f"unknown filter key {key!r}; choose from {', '.join(FILTER_KEYS)}")
