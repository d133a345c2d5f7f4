"""Ensemble container and the empirical statistics every filter consumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# dense_sample_covariance is a test/diagnostic oracle; refuse to build
# giant matrices by accident.
DENSE_ORACLE_CAP = 500


@dataclass(frozen=True)
class Ensemble:
    """Collection of state vectors stored as an (nstate, nens) matrix.

    Each column holds one member, contiguous in memory so that filter
    operations stream over members. The matrix is copied and frozen on
    construction; instances are safe to share between threads.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float, order="F")
        if m.ndim != 2:
            raise ValueError("ensemble matrix must be 2-D (nstate, nens)")
        if m.shape[1] == 0:
            raise ValueError("empty ensemble")
        if m.shape[0] == 0:
            raise ValueError("ensemble members must have at least one component")
        if not np.all(np.isfinite(m)):
            raise ValueError("ensemble contains non-finite entries")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_members(cls, members) -> "Ensemble":
        """Build an ensemble from an iterable of equally sized 1-D vectors."""
        cols = [np.asarray(v, dtype=float) for v in members]
        if not cols:
            raise ValueError("empty ensemble")
        n = cols[0].shape
        if any(c.ndim != 1 or c.shape != n for c in cols):
            raise ValueError("all members must be 1-D vectors of identical length")
        return cls(np.column_stack(cols))

    @property
    def nstate(self) -> int:
        return self.matrix.shape[0]

    @property
    def nens(self) -> int:
        return self.matrix.shape[1]

    def member(self, i: int) -> np.ndarray:
        return self.matrix[:, i]


@dataclass(frozen=True)
class DeviationMatrix:
    """Member deviations about the ensemble mean, one column per member.

    ``scaled`` records whether the 1/sqrt(nens - 1) factor is applied, in
    which case ``columns @ columns.T`` is the sample covariance. Columns
    sum to zero by construction.
    """

    columns: np.ndarray
    scaled: bool

    def __post_init__(self):
        c = np.array(self.columns, dtype=float)
        if c.ndim != 2:
            raise ValueError("deviation matrix must be 2-D")
        scale = max(1.0, float(np.max(np.linalg.norm(c, axis=0), initial=0.0)))
        if np.max(np.abs(c.sum(axis=1)), initial=0.0) > 1e-12 * scale * c.shape[1]:
            raise ValueError("deviation columns must sum to zero")
        c.flags.writeable = False
        object.__setattr__(self, "columns", c)

    @property
    def nstate(self) -> int:
        return self.columns.shape[0]

    @property
    def nens(self) -> int:
        return self.columns.shape[1]


def ensemble_mean(ens: Ensemble) -> np.ndarray:
    """Component-wise arithmetic mean of the members."""
    if ens.nens == 0:
        raise ValueError("empty ensemble")
    return ens.matrix.mean(axis=1)


def deviations(ens: Ensemble) -> DeviationMatrix:
    """Scaled deviations: column i = (x_i - mean) / sqrt(nens - 1)."""
    if ens.nens < 2:
        raise ValueError("degenerate ensemble")
    mean = ensemble_mean(ens)
    cols = (ens.matrix - mean[:, None]) / np.sqrt(ens.nens - 1)
    return DeviationMatrix(cols, scaled=True)


def anomalies(ens: Ensemble) -> DeviationMatrix:
    """Unscaled anomalies: column i = x_i - mean."""
    if ens.nens < 2:
        raise ValueError("degenerate ensemble")
    mean = ensemble_mean(ens)
    return DeviationMatrix(ens.matrix - mean[:, None], scaled=False)


def dense_sample_covariance(ens: Ensemble, cap: int = DENSE_ORACLE_CAP) -> np.ndarray:
    """Explicit (nstate, nstate) sample covariance, for oracles and tests only.

    Equals S @ S.T with S the scaled deviations; symmetric positive
    semidefinite with rank at most nens - 1.
    """
    if ens.nstate > cap:
        raise ValueError("oracle size exceeded")
    s = deviations(ens).columns
    cov = s @ s.T
    return 0.5 * (cov + cov.T)


def write_ensemble_csv(ens: Ensemble, path) -> None:
    """Checkpoint an ensemble as CSV: header ``member,c0,c1,...``, one row per member."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("member," + ",".join(f"c{i}" for i in range(ens.nstate)) + "\n")
        for i in range(ens.nens):
            row = ",".join("%.17g" % v for v in ens.matrix[:, i])
            fh.write(f"{i},{row}\n")


def read_ensemble_csv(path) -> Ensemble:
    """Read an ensemble checkpoint written by :func:`write_ensemble_csv`."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "member":
            raise ValueError("not an ensemble CSV (missing 'member' header)")
        members = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            members.append(np.array([float(v) for v in parts[1:]]))
    return Ensemble.from_members(members)
