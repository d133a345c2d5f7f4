"""Forward models for twin experiments: Lorenz-96 and a quasi-geostrophic
vorticity model on the unit square.

The QG state is the flattened interior vorticity field; the stream
function is recovered each evaluation by an exact fast Poisson solve
(discrete sine transform diagonalization of the 5-point Laplacian with
homogeneous Dirichlet boundaries). Advection uses the energy- and
enstrophy-conserving Arakawa discretization. All tendencies accept either
a single state vector or an (nstate, members) batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.fft


# ---------------------------------------------------------------------------
# Lorenz-96


def lorenz96_tendency(x: np.ndarray, forcing: float) -> np.ndarray:
    """Cyclic tendency dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 4:
        raise ValueError("Lorenz-96 needs at least 4 variables")
    return (np.roll(x, -1, axis=0) - np.roll(x, 2, axis=0)) * np.roll(x, 1, axis=0) - x + forcing


# ---------------------------------------------------------------------------
# Quasi-geostrophic model


@dataclass(frozen=True)
class QgGrid:
    """Interior grid of the unit-square domain; boundary nodes carry zeros.

    ``d1`` and ``d2`` count interior points in x and y; spacings are
    lx/(d1+1) and ly/(d2+1). The state is the row-major flattening of the
    (d1, d2) interior vorticity field.
    """

    d1: int
    d2: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.d1 < 3 or self.d2 < 3:
            raise ValueError("grid needs at least 3 interior points per direction")

    @property
    def dx(self) -> float:
        return self.lx / (self.d1 + 1)

    @property
    def dy(self) -> float:
        return self.ly / (self.d2 + 1)

    @property
    def nstate(self) -> int:
        return self.d1 * self.d2

    @property
    def x(self) -> np.ndarray:
        """Interior node x coordinates."""
        return self.dx * np.arange(1, self.d1 + 1)

    @property
    def y(self) -> np.ndarray:
        """Interior node y coordinates."""
        return self.dy * np.arange(1, self.d2 + 1)

    def to_grid(self, state: np.ndarray) -> np.ndarray:
        """Reshape flat state(s) to (d1, d2[, members])."""
        state = np.asarray(state, dtype=float)
        if state.shape[0] != self.nstate:
            raise ValueError("state length does not match the grid")
        return state.reshape((self.d1, self.d2) + state.shape[1:])

    def to_state(self, field: np.ndarray) -> np.ndarray:
        return field.reshape((self.nstate,) + field.shape[2:])


@dataclass(frozen=True)
class QgParams:
    """Model coefficients, all in nondimensional units.

    ``jacobian_sign`` multiplies r * J(psi, omega) in the tendency
    (default -1: the stream-function flow advects vorticity) and
    ``biharmonic_sign`` multiplies viscosity * Lap^2(psi) (default +1,
    which diffuses vorticity). Both signs are exposed because the
    continuous equation admits either convention.

    Defaults keep the 1000-step integration at dt = 1.27 finite on all
    shipped grid sizes (advective stability bounds r; the explicit
    viscosity must satisfy 8 * viscosity * dt / dx^2 < 2.8 on the finest
    grid) while leaving the flow visibly evolving between analyses.
    """

    r: float = 0.01
    beta: float = 2.0
    viscosity: float = 1e-5
    drag: float = 1e-3
    wind: float = 0.01
    dt: float = 1.27
    jacobian_sign: float = -1.0
    biharmonic_sign: float = 1.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")


def _pad_interior(field: np.ndarray) -> np.ndarray:
    """Zero Dirichlet ghost ring around the first two axes."""
    pad = [(1, 1), (1, 1)] + [(0, 0)] * (field.ndim - 2)
    return np.pad(field, pad)


def laplacian(field: np.ndarray, grid: QgGrid) -> np.ndarray:
    """5-point Laplacian with homogeneous Dirichlet boundaries."""
    f = _pad_interior(field)
    inner = f[1:-1, 1:-1]
    return ((f[2:, 1:-1] + f[:-2, 1:-1] - 2.0 * inner) / grid.dx**2
            + (f[1:-1, 2:] + f[1:-1, :-2] - 2.0 * inner) / grid.dy**2)


def x_derivative(field: np.ndarray, grid: QgGrid) -> np.ndarray:
    """Central difference in x with zero boundary values."""
    f = _pad_interior(field)
    return (f[2:, 1:-1] - f[:-2, 1:-1]) / (2.0 * grid.dx)


def arakawa_jacobian(psi: np.ndarray, omega: np.ndarray, grid: QgGrid) -> np.ndarray:
    """Arakawa discretization of J(psi, omega) = psi_x omega_y - psi_y omega_x.

    Average of the three canonical second-order forms, which conserves the
    domain integrals of J, psi * J and omega * J.
    """
    if psi.shape != omega.shape:
        raise ValueError("fields must share a shape")
    p = _pad_interior(psi)
    w = _pad_interior(omega)
    j1 = ((p[2:, 1:-1] - p[:-2, 1:-1]) * (w[1:-1, 2:] - w[1:-1, :-2])
          - (p[1:-1, 2:] - p[1:-1, :-2]) * (w[2:, 1:-1] - w[:-2, 1:-1]))
    j2 = (p[2:, 1:-1] * (w[2:, 2:] - w[2:, :-2])
          - p[:-2, 1:-1] * (w[:-2, 2:] - w[:-2, :-2])
          - p[1:-1, 2:] * (w[2:, 2:] - w[:-2, 2:])
          + p[1:-1, :-2] * (w[2:, :-2] - w[:-2, :-2]))
    j3 = (w[1:-1, 2:] * (p[2:, 2:] - p[:-2, 2:])
          - w[1:-1, :-2] * (p[2:, :-2] - p[:-2, :-2])
          - w[2:, 1:-1] * (p[2:, 2:] - p[2:, :-2])
          + w[:-2, 1:-1] * (p[:-2, 2:] - p[:-2, :-2]))
    return (j1 + j2 + j3) / (12.0 * grid.dx * grid.dy)


def _dirichlet_eigenvalues(n: int, spacing: float) -> np.ndarray:
    k = np.arange(1, n + 1)
    return (2.0 * np.cos(np.pi * k / (n + 1)) - 2.0) / spacing**2


def poisson_solve(omega: np.ndarray, grid: QgGrid) -> np.ndarray:
    """Solve Lap(psi) = omega exactly for the discrete 5-point operator.

    Fast diagonalization by type-I discrete sine transforms in both
    directions; psi vanishes on the boundary.
    """
    omega = np.asarray(omega, dtype=float)
    if not np.all(np.isfinite(omega)):
        raise ValueError("omega contains non-finite entries")
    eig = (_dirichlet_eigenvalues(grid.d1, grid.dx)[:, None]
           + _dirichlet_eigenvalues(grid.d2, grid.dy)[None, :])
    if omega.ndim == 3:
        eig = eig[:, :, None]
    coeff = scipy.fft.dstn(omega, type=1, axes=(0, 1))
    psi = scipy.fft.dstn(coeff / eig, type=1, axes=(0, 1))
    return psi / (4.0 * (grid.d1 + 1) * (grid.d2 + 1))


def poisson_solve_dense(omega: np.ndarray, grid: QgGrid) -> np.ndarray:
    """Dense fallback solve of the same system, for oracles and tests."""
    n1, n2 = grid.d1, grid.d2
    ix = np.eye(n1)
    iy = np.eye(n2)
    tx = (np.diag(np.full(n1 - 1, 1.0), 1) + np.diag(np.full(n1 - 1, 1.0), -1)
          - 2.0 * ix) / grid.dx**2
    ty = (np.diag(np.full(n2 - 1, 1.0), 1) + np.diag(np.full(n2 - 1, 1.0), -1)
          - 2.0 * iy) / grid.dy**2
    operator = np.kron(tx, iy) + np.kron(ix, ty)
    flat = omega.reshape(grid.nstate, -1)
    return np.linalg.solve(operator, flat).reshape(omega.shape)


def qg_tendency(omega: np.ndarray, grid: QgGrid, params: QgParams) -> np.ndarray:
    """Vorticity tendency of the wind-driven single-layer model.

    omega_t = sign_J * r * J(psi, omega) - beta * psi_x
              + sign_v * viscosity * Lap(Lap(psi)) - drag * Lap(psi)
              + wind * sin(2 pi y / ly),
    with psi from the exact Poisson solve of Lap(psi) = omega.
    """
    omega = np.asarray(omega, dtype=float)
    flat_input = omega.shape[0] == grid.nstate and omega.ndim <= 2
    field = grid.to_grid(omega) if flat_input else omega
    psi = poisson_solve(field, grid)
    lap_psi = laplacian(psi, grid)
    bilap_psi = laplacian(lap_psi, grid)
    forcing = params.wind * np.sin(2.0 * np.pi * grid.y / grid.ly)[None, :]
    if field.ndim == 3:
        forcing = forcing[:, :, None]
    out = (params.jacobian_sign * params.r * arakawa_jacobian(psi, field, grid)
           - params.beta * x_derivative(psi, grid)
           + params.biharmonic_sign * params.viscosity * bilap_psi
           - params.drag * lap_psi
           + forcing)
    return grid.to_state(out) if flat_input else out


def qg_initial_vorticity(grid: QgGrid) -> np.ndarray:
    """Initial interior vorticity sin(4xy)cos(2xy) + sin(2xy) + cos(4xy), flattened."""
    xy = grid.x[:, None] * grid.y[None, :]
    field = np.sin(4.0 * xy) * np.cos(2.0 * xy) + np.sin(2.0 * xy) + np.cos(4.0 * xy)
    return grid.to_state(field)


# ---------------------------------------------------------------------------
# Time stepping and the uniform model interface


def rk4_step(tendency: Callable[[np.ndarray], np.ndarray],
             state: np.ndarray, dt: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step.

    Non-finite stage values raise "model blow-up" instead of propagating
    overflow into the next tendency evaluation.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")

    def stage(x):
        with np.errstate(over="ignore", invalid="ignore"):
            k = tendency(x)
        if not np.all(np.isfinite(k)):
            raise RuntimeError("model blow-up")
        return k

    k1 = stage(state)
    k2 = stage(state + 0.5 * dt * k1)
    k3 = stage(state + 0.5 * dt * k2)
    k4 = stage(state + dt * k3)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise RuntimeError("model blow-up")
    return out


@dataclass(frozen=True)
class ModelDefinition:
    """Uniform forward-model interface used by the experiment harness."""

    name: str
    nstate: int
    dt: float
    tendency: Callable[[np.ndarray], np.ndarray]
    initial_state: Callable[[], np.ndarray]
    distance: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def step(self, state: np.ndarray, dt: float | None = None) -> np.ndarray:
        """Advance one time step (the model default unless overridden)."""
        return rk4_step(self.tendency, state, self.dt if dt is None else dt)


def lorenz96_model(n: int = 40, forcing: float = 8.0, dt: float = 0.05,
                   spinup_steps: int = 500) -> ModelDefinition:
    """Lorenz-96 with cyclic geometry; the initial state is spun up onto
    the attractor from a deterministic perturbation of the fixed point."""

    def tendency(x):
        return lorenz96_tendency(x, forcing)

    def initial_state():
        x = np.full(n, forcing)
        x += 0.01 * forcing * np.cos(2.0 * np.pi * np.arange(n) / n)
        for _ in range(spinup_steps):
            x = rk4_step(tendency, x, dt)
        return x

    def distance(i, j):
        diff = np.abs(np.asarray(i) - np.asarray(j))
        return np.minimum(diff, n - diff).astype(float)

    return ModelDefinition(name=f"l96-{n}", nstate=n, dt=dt,
                           tendency=tendency, initial_state=initial_state,
                           distance=distance)


def qg_model(d1: int, d2: int, params: QgParams | None = None,
             name: str | None = None) -> ModelDefinition:
    """Quasi-geostrophic model on a (d1, d2) interior grid."""
    grid = QgGrid(d1=d1, d2=d2)
    params = params if params is not None else QgParams()

    def tendency(state):
        return qg_tendency(state, grid, params)

    def initial_state():
        return qg_initial_vorticity(grid)

    def distance(i, j):
        i = np.asarray(i)
        j = np.asarray(j)
        xi, yi = grid.x[i // grid.d2], grid.y[i % grid.d2]
        xj, yj = grid.x[j // grid.d2], grid.y[j % grid.d2]
        return np.hypot(xi - xj, yi - yj)

    model = ModelDefinition(name=name or f"qg-{d1 + 2}", nstate=grid.nstate,
                            dt=params.dt, tendency=tendency,
                            initial_state=initial_state, distance=distance)
    object.__setattr__(model, "grid", grid)
    object.__setattr__(model, "params", params)
    return model


_QG_SIZES = {"qg-33": 31, "qg-65": 63, "qg-129": 127}


def get_model(key: str, overrides: dict | None = None) -> ModelDefinition:
    """Resolve a CLI model key (``l96-<n>``, ``qg-33``, ``qg-65``, ``qg-129``).

    ``overrides`` may adjust coefficients: keys ``l96_forcing``,
    ``model_dt`` and the ``qg_*`` counterparts of the QgParams fields.
    """
    overrides = dict(overrides or {})
    if key.startswith("l96-"):
        n = int(key.split("-", 1)[1])
        return lorenz96_model(n=n,
                              forcing=float(overrides.get("l96_forcing", 8.0)),
                              dt=float(overrides.get("model_dt", 0.05)))
    if key in _QG_SIZES:
        d = _QG_SIZES[key]
        params = QgParams()
        fields = {"qg_r": "r", "qg_beta": "beta", "qg_viscosity": "viscosity",
                  "qg_drag": "drag", "qg_wind": "wind", "model_dt": "dt",
                  "qg_jacobian_sign": "jacobian_sign",
                  "qg_biharmonic_sign": "biharmonic_sign"}
        updates = {attr: float(overrides[k]) for k, attr in fields.items() if k in overrides}
        if updates:
            params = replace(params, **updates)
        return qg_model(d, d, params=params, name=key)
    raise ValueError(f"unknown model key {key!r}")
