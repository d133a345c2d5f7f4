"""Observation-space linear solvers shared by the filters.

The iterative Sherman-Morrison formula (ISMF) solves
(Gamma + Pi @ Pi.T) @ Z = rhs through a sequence of rank-one updates,
touching Gamma only through its inverse action. The square-root and
transform factorizations consumed by the deterministic filters live here
as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Dense fallback after an ISMF pivot breakdown is only attempted up to
# this system size.
DENSE_FALLBACK_CAP = 5000

_PIVOT_TOL = 1e-14


class IsmfBreakdown(RuntimeError):
    """Raised when an ISMF pivot vanishes; callers may fall back to a dense solve."""


@dataclass(frozen=True)
class ObservationSpaceSystem:
    """System (Gamma + Pi @ Pi.T) @ Z = rhs with Gamma given by its inverse action.

    ``gamma_inverse_apply`` maps an (nobs, cols) matrix to Gamma^{-1} times
    it; Gamma is implicitly symmetric positive definite. ``pi`` holds the
    low-rank update columns and ``rhs`` the right-hand sides.
    """

    gamma_inverse_apply: Callable[[np.ndarray], np.ndarray]
    pi: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        pi = np.atleast_2d(np.asarray(self.pi, dtype=float))
        rhs = np.asarray(self.rhs, dtype=float)
        if rhs.ndim == 1:
            rhs = rhs[:, None]
        if pi.shape[0] != rhs.shape[0]:
            raise ValueError("pi and rhs must have the same row count")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "rhs", rhs)


def diagonal_inverse(variances: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Inverse action of a diagonal SPD matrix given its diagonal."""
    d = np.asarray(variances, dtype=float)
    if np.any(d <= 0.0):
        raise ValueError("diagonal entries must be positive")

    def apply(m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        return m / d[:, None] if m.ndim == 2 else m / d

    return apply


def ismf_solve(sys: ObservationSpaceSystem) -> np.ndarray:
    """Solve (Gamma + Pi @ Pi.T) @ Z = rhs by iterated Sherman-Morrison updates.

    Starting from Z = Gamma^{-1} rhs and U = Gamma^{-1} Pi, each column of
    Pi is folded in as a rank-one update; cost is O(m^2 * nobs) beyond the
    two inverse applications. On pivot breakdown a dense solve is attempted
    for systems up to ``DENSE_FALLBACK_CAP`` rows.
    """
    z = np.array(sys.gamma_inverse_apply(sys.rhs), dtype=float)
    m = sys.pi.shape[1]
    if m == 0 or not np.any(sys.pi):
        return z
    u = np.array(sys.gamma_inverse_apply(sys.pi), dtype=float)
    try:
        for k in range(m):
            v_k = sys.pi[:, k]
            u_k = u[:, k]
            pivot = 1.0 + v_k @ u_k
            if abs(pivot) < _PIVOT_TOL:
                raise IsmfBreakdown("ISMF breakdown")
            h = u_k / pivot
            z -= np.outer(h, v_k @ z)
            # columns up to k are never read again
            if k + 1 < m:
                u[:, k + 1:] -= np.outer(h, v_k @ u[:, k + 1:])
    except IsmfBreakdown:
        return _dense_fallback(sys)
    return z


def _dense_fallback(sys: ObservationSpaceSystem) -> np.ndarray:
    nobs = sys.pi.shape[0]
    if nobs > DENSE_FALLBACK_CAP:
        raise IsmfBreakdown("ISMF breakdown")
    gamma = np.linalg.inv(np.asarray(sys.gamma_inverse_apply(np.eye(nobs)), dtype=float))
    return np.linalg.solve(gamma + sys.pi @ sys.pi.T, sys.rhs)


def ensrf_transform(v: np.ndarray, z_v: np.ndarray) -> np.ndarray:
    """Symmetric square root of I - V.T @ Z_V used by the square-root filter.

    ``z_v`` solves (R + V @ V.T) @ Z_V = V, so V.T @ Z_V is symmetric PSD
    with eigenvalues below one; the transform satisfies
    T @ T.T = I - V.T @ Z_V.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    z_v = np.atleast_2d(np.asarray(z_v, dtype=float))
    prod = v.T @ z_v
    prod = 0.5 * (prod + prod.T)
    eigval, eigvec = np.linalg.eigh(prod)
    if eigval.size and eigval[-1] > 1.0 + 1e-8:
        raise ValueError("non-contractive update")
    eigval = np.clip(eigval, 0.0, 1.0)
    return (eigvec * np.sqrt(1.0 - eigval)) @ eigvec.T


@dataclass(frozen=True)
class EntkfFactors:
    """Factors of the transform filter built from the whitened deviations.

    ``u`` and ``wt`` are the singular vectors of (R^{-1/2} V).T and ``sing``
    its singular values; ``inv_factor`` is 1 / (1 + sing^2). ``transform``
    is the symmetric contraction applied to the anomalies; it equals
    (I + V.T R^{-1} V)^{-1/2}.
    """

    u: np.ndarray
    sing: np.ndarray
    wt: np.ndarray
    r_std: np.ndarray
    inv_factor: np.ndarray
    transform: np.ndarray

    def mean_weights(self, innovation: np.ndarray) -> np.ndarray:
        """Optimal weights for the analysis mean given y - H @ xb_mean."""
        whitened = np.asarray(innovation, dtype=float) / self.r_std
        return self.u @ (self.sing * self.inv_factor * (self.wt @ whitened))


def entkf_factors(v: np.ndarray, r_variances: np.ndarray) -> EntkfFactors:
    """Factor the transform filter pieces from V = H @ S and diagonal R.

    The singular value decomposition is taken of (R^{-1/2} V).T; the
    returned transform uses the inverse square root so the analysis
    covariance contracts, matching the square-root filter.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    r_var = np.asarray(r_variances, dtype=float)
    if np.any(r_var <= 0.0):
        raise ValueError("observation variances must be positive")
    if r_var.shape[0] != v.shape[0]:
        raise ValueError("variance count must match observation rows")
    r_std = np.sqrt(r_var)
    nens = v.shape[1]
    u, sing, wt = np.linalg.svd((v / r_std[:, None]).T, full_matrices=False)
    inv_factor = 1.0 / (1.0 + sing**2)
    # exact even when nobs < nens: unresolved directions stay untouched
    transform = np.eye(nens) + (u * (np.sqrt(inv_factor) - 1.0)) @ u.T
    return EntkfFactors(u=u, sing=sing, wt=wt, r_std=r_std,
                        inv_factor=inv_factor, transform=transform)
