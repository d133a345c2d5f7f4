"""Synthetic ensemble members drawn from the shrinkage-estimated prior.

Draws from N(mean, phi * I + delta * S @ S.T) are assembled as
mean + sqrt(phi) * eps1 + sqrt(delta) * S @ eps2 with independent standard
normal eps1 (length nstate) and eps2 (length nens); the covariance matrix
and its square root are never formed. Every member has its own
counter-based random stream so draws are reproducible regardless of
evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .ensemble import Ensemble
from .shrinkage import ShrinkageCovariance

_U64 = (1 << 64) - 1
_BITS53 = 1 << 53


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream addressed by (seed, stream_id).

    Identical (seed, stream_id) pairs reproduce identical draw sequences
    bit-for-bit. ``child`` derives a collision-resistant substream for a
    purpose or cycle index; ``member_generator`` hands out one independent
    counter-based generator per member index. A single generator must not
    be shared across threads, but distinct streams may run concurrently.
    """

    seed: int
    stream_id: int = 0

    def _seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed & _U64,
                                      spawn_key=(self.stream_id & _U64,))

    def child(self, *path: int) -> "RngStream":
        """Derive a substream for the given index path."""
        ss = np.random.SeedSequence(entropy=self.seed & _U64,
                                    spawn_key=(self.stream_id & _U64,)
                                    + tuple(p & _U64 for p in path))
        new_id = int(ss.generate_state(1, np.uint64)[0])
        return RngStream(seed=self.seed, stream_id=new_id)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(seed=self._seed_sequence()))

    def member_generator(self, index: int) -> np.random.Generator:
        """Independent generator for one member; cheap for large member counts."""
        base = np.random.Philox(seed=self._seed_sequence())
        return np.random.Generator(base.jumped(index))


def standard_normal(gen: np.random.Generator, size) -> np.ndarray:
    """Standard normals via inverse CDF of 53-bit uniforms.

    The offset keeps the uniforms strictly inside (0, 1) so the inverse
    CDF never hits an endpoint.
    """
    u = (gen.integers(0, _BITS53, size=size, dtype=np.int64) + 0.5) / _BITS53
    return ndtri(u)


@dataclass(frozen=True)
class ExtendedEnsemble:
    """Real members plus synthetic draws, nk = nens + k columns in total.

    Deviations are always taken about the mean of the real members; the
    synthetic draws are centered there by construction.
    """

    real: Ensemble
    synthetic: np.ndarray

    def __post_init__(self):
        syn = np.array(self.synthetic, dtype=float)
        if syn.size == 0:
            syn = np.zeros((self.real.nstate, 0))
        if syn.ndim != 2 or syn.shape[0] != self.real.nstate:
            raise ValueError("synthetic members must be (nstate, k)")
        if not np.all(np.isfinite(syn)):
            raise ValueError("synthetic members contain non-finite entries")
        syn.flags.writeable = False
        object.__setattr__(self, "synthetic", syn)

    @property
    def nk(self) -> int:
        return self.real.nens + self.synthetic.shape[1]

    def members(self) -> np.ndarray:
        """All members, real first then synthetic, as (nstate, nk)."""
        return np.concatenate([self.real.matrix, self.synthetic], axis=1)

    def anomalies(self) -> np.ndarray:
        """Unscaled anomalies about the real-member mean, (nstate, nk)."""
        mean = self.real.matrix.mean(axis=1)
        return self.members() - mean[:, None]

    def scaled_deviations(self) -> np.ndarray:
        """Anomalies about the real mean scaled by 1/sqrt(nk - 1)."""
        if self.nk < 2:
            raise ValueError("degenerate ensemble")
        return self.anomalies() / np.sqrt(self.nk - 1)


def draw_synthetic_members(mean: np.ndarray, cov: ShrinkageCovariance,
                           k: int, rng: RngStream) -> np.ndarray:
    """Draw k members from N(mean, phi*I + delta*S@S.T) as an (nstate, k) array.

    Member i consumes stream ``rng.member_generator(i)``, drawing eps1 then
    eps2, which makes the output independent of evaluation order.
    """
    if cov.phi < 0.0 or cov.delta < 0.0:
        raise ValueError("invalid shrinkage parameters")
    if k < 0:
        raise ValueError("k must be nonnegative")
    mean = np.asarray(mean, dtype=float)
    s = cov.deviations.columns
    if mean.shape[0] != s.shape[0]:
        raise ValueError("mean length must equal nstate")
    nstate, nens = s.shape
    draws = np.empty((nstate, k))
    sqrt_phi = np.sqrt(cov.phi)
    sqrt_delta = np.sqrt(cov.delta)
    for i in range(k):
        gen = rng.member_generator(i)
        eps1 = standard_normal(gen, nstate)
        eps2 = standard_normal(gen, nens)
        draws[:, i] = mean + sqrt_phi * eps1 + sqrt_delta * (s @ eps2)
    return draws


def extend_ensemble(real: Ensemble, synthetic) -> ExtendedEnsemble:
    """Concatenate real members and synthetic draws, preserving order."""
    syn = np.asarray(synthetic, dtype=float)
    if syn.size == 0:
        syn = np.zeros((real.nstate, 0))
    if syn.ndim == 1:
        syn = syn[:, None]
    if syn.shape[0] != real.nstate:
        raise ValueError("synthetic member length must equal nstate")
    return ExtendedEnsemble(real=real, synthetic=syn)


def perturb_observations(y: np.ndarray, obs, n: int, rng: RngStream) -> np.ndarray:
    """n perturbed copies of the observation vector, one per column.

    Column i is y + sqrt(R) @ eta_i with eta_i standard normal and R the
    diagonal observation error covariance from ``obs``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    y = np.asarray(y, dtype=float)
    std = np.sqrt(obs.variances)
    if y.shape[0] != std.shape[0]:
        raise ValueError("observation vector length must match the variances")
    out = np.empty((y.shape[0], n))
    for i in range(n):
        gen = rng.member_generator(i)
        out[:, i] = y + std * standard_normal(gen, y.shape[0])
    return out
