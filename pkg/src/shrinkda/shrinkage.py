"""Ledoit-Wolf-family shrinkage estimators for ensemble covariances.

The Rao-Blackwell Ledoit-Wolf (RBLW) coefficients are evaluated matrix-free
from the singular values of the deviation matrix, so the sample covariance
is never formed. The plain Ledoit-Wolf and oracle-approximating (OAS)
estimators operate on explicit centered samples and serve as small-scale
baselines and oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import DeviationMatrix, Ensemble, deviations

# Singular values below this fraction of the largest are treated as zero
# rank; tiny values must not pollute the fourth-power sums.
RANK_TOL = 1e-12


@dataclass(frozen=True)
class ShrinkageCovariance:
    """Implicit covariance estimate phi * I + delta * S @ S.T.

    Holds the triplet (phi, delta, S) plus the underlying (mu, gamma) pair
    with phi = mu * gamma and delta = 1 - gamma. The matrix itself is never
    formed; see :func:`apply_shrunk_covariance`.
    """

    mu: float
    gamma: float
    phi: float
    delta: float
    deviations: DeviationMatrix

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must lie in [0, 1]")
        if self.mu < 0.0 or self.phi < 0.0:
            raise ValueError("mu and phi must be nonnegative")
        scale = max(1.0, abs(self.mu))
        if abs(self.delta - (1.0 - self.gamma)) > 1e-14:
            raise ValueError("delta must equal 1 - gamma")
        if abs(self.phi - self.mu * self.gamma) > 1e-14 * scale:
            raise ValueError("phi must equal mu * gamma")

    @property
    def nstate(self) -> int:
        return self.deviations.nstate

    @classmethod
    def from_ensemble(cls, ens: Ensemble) -> "ShrinkageCovariance":
        """Estimate (mu, gamma, phi, delta) from an ensemble via RBLW."""
        devs = deviations(ens)
        svals = deviation_singular_values(devs)
        mu, gamma, phi, delta = rblw_parameters(svals, ens.nstate, ens.nens)
        return cls(mu=mu, gamma=gamma, phi=phi, delta=delta, deviations=devs)


def deviation_singular_values(devs: DeviationMatrix) -> np.ndarray:
    """Nonincreasing singular values of the deviation matrix, padded to nens.

    Their squares are the nonzero eigenvalues of S @ S.T; at most nens - 1
    of them exceed the rank tolerance because the columns sum to zero.
    """
    cols = devs.columns
    if not np.any(cols):
        raise ValueError("zero deviations")
    svals = np.linalg.svd(cols, compute_uv=False)
    if svals.shape[0] < devs.nens:
        svals = np.concatenate([svals, np.zeros(devs.nens - svals.shape[0])])
    return svals


def rblw_parameters(sing_vals, nstate: int, nens: int):
    """RBLW shrinkage coefficients from deviation singular values.

    Returns ``(mu, gamma, phi, delta)`` where mu is the mean sample
    variance tr(P)/nstate, gamma the min-clamped RBLW shrinkage intensity,
    phi = mu * gamma and delta = 1 - gamma. Only the traces tr(P) and
    tr(P^2) enter, and both reduce to power sums of the singular values.
    """
    if nens < 3:
        raise ValueError("too few members for RBLW")
    svals = np.asarray(sing_vals, dtype=float)
    if svals.size == 0 or not np.any(svals > 0.0):
        raise ValueError("zero deviations")
    kept = svals[svals > RANK_TOL * svals.max()]
    trace_p = float(np.sum(kept**2))
    trace_p2 = float(np.sum(kept**4))
    mu = trace_p / nstate
    numer = (nens - 2) / nstate * trace_p2 + trace_p**2
    denom = (nens + 2) * (trace_p2 - trace_p**2 / nstate)
    gamma = 1.0 if denom <= 0.0 else min(numer / denom, 1.0)
    return mu, gamma, mu * gamma, 1.0 - gamma


def _as_columns(samples) -> np.ndarray:
    """Normalize a list of vectors or an (nstate, n) array to column form."""
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        return np.asarray(samples, dtype=float)
    return np.column_stack([np.asarray(v, dtype=float) for v in samples])


def _sample_covariance(samples: np.ndarray) -> np.ndarray:
    n = samples.shape[1]
    return (samples @ samples.T) / (n - 1)


def lw_gamma(samples, nstate: int) -> float:
    """Distribution-free Ledoit-Wolf shrinkage intensity (dense, baseline only).

    ``samples`` holds centered vectors, one per column. Clamped at 1.
    """
    s = _as_columns(samples)
    if s.shape[1] < 2:
        raise ValueError("need at least 2 samples")
    cov = _sample_covariance(s)
    if not np.any(cov):
        raise ValueError("zero covariance")
    numer = sum(np.linalg.norm(cov - np.outer(s[:, i], s[:, i])) ** 2
                for i in range(s.shape[1]))
    trace_c2 = float(np.trace(cov @ cov))
    trace_c = float(np.trace(cov))
    denom = s.shape[1] ** 2 * (trace_c2 - trace_c**2 / nstate)
    if denom <= 0.0:
        return 1.0
    return min(numer / denom, 1.0)


def oas_gamma(samples, nstate: int, init: float = 1.0,
              max_iter: int = 100, tol: float = 1e-10):
    """Oracle-approximating shrinkage intensity via fixed-point iteration.

    Iterates the OAS map starting from ``init`` until successive values
    differ by less than ``tol``. Returns ``(gamma, converged)``; gamma is
    clamped to [0, 1] at every step. Note gamma = 1 is itself a fixed
    point of the map, so the default initializer matters.
    """
    s = _as_columns(samples)
    nens = s.shape[1]
    if nens < 2:
        raise ValueError("need at least 2 samples")
    if not (0.0 <= init <= 1.0):
        raise ValueError("init must lie in [0, 1]")
    cov = _sample_covariance(s)
    if not np.any(cov):
        raise ValueError("zero covariance")
    trace_c = float(np.trace(cov))
    trace_c2 = float(np.trace(cov @ cov))
    mu = trace_c / nstate
    # tr(C_j) = tr(C_s) for every iterate because the target has equal trace.
    trace_sq = trace_c**2
    gamma = float(init)
    converged = False
    for _ in range(max_iter):
        trace_prod = gamma * mu * trace_c + (1.0 - gamma) * trace_c2
        numer = (1.0 - 2.0 / nstate) * trace_prod + trace_sq
        denom = (nens + 1.0 - 2.0 / nstate) * trace_prod + (1.0 - nens / nstate) * trace_sq
        new_gamma = min(max(numer / denom, 0.0), 1.0)
        if abs(new_gamma - gamma) < tol:
            gamma = new_gamma
            converged = True
            break
        gamma = new_gamma
    return gamma, converged


def apply_shrunk_covariance(cov: ShrinkageCovariance, m: np.ndarray) -> np.ndarray:
    """Evaluate (phi * I + delta * S @ S.T) @ m without forming the matrix.

    Cost is O(nstate * nens * cols); ``m`` may be a vector or a matrix with
    nstate rows.
    """
    m = np.asarray(m, dtype=float)
    rows = m.shape[0]
    if rows != cov.nstate:
        raise ValueError("row count of operand must equal nstate")
    s = cov.deviations.columns
    return cov.phi * m + cov.delta * (s @ (s.T @ m))


def apply_inverse_shrunk_covariance(cov: ShrinkageCovariance, m: np.ndarray) -> np.ndarray:
    """Evaluate (phi * I + delta * S @ S.T)^{-1} @ m via the Woodbury identity.

    Requires phi > 0 (true whenever gamma > 0 and the deviations are
    nonzero); the inner solve has size nens.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[0] != cov.nstate:
        raise ValueError("row count of operand must equal nstate")
    if cov.phi <= 0.0:
        raise ValueError("invalid shrinkage parameters")
    if cov.delta == 0.0:
        return m / cov.phi
    s = cov.deviations.columns
    inner = (cov.phi / cov.delta) * np.eye(s.shape[1]) + s.T @ s
    return (m - s @ np.linalg.solve(inner, s.T @ m)) / cov.phi
