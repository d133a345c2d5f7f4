"""Shared construction helpers for the test suite."""

import numpy as np

from shrinkda.ensemble import Ensemble


def random_ensemble(gen, nstate, nens, spread=1.0):
    base = gen.standard_normal(nstate)
    return Ensemble(base[:, None] + spread * gen.standard_normal((nstate, nens)))


def selection_matrix(obs, nstate):
    """Dense observation operator H for oracle computations."""
    h = np.zeros((obs.nobs, nstate))
    h[np.arange(obs.nobs), obs.indices] = 1.0
    return h
