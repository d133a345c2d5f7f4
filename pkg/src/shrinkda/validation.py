"""Property suite behind ``dacli validate``.

Every module-level invariant is encoded as a small seeded check on
modest-sized instances. The pytest suite asserts the same properties;
this module makes them runnable from the CLI without pytest.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import filters, harness, models
from .ensemble import Ensemble, dense_sample_covariance, deviations
from .observations import ObservationSpec
from .sampling import (RngStream, draw_synthetic_members, extend_ensemble,
                       perturb_observations, standard_normal)
from .shrinkage import ShrinkageCovariance, deviation_singular_values, rblw_parameters
from .solvers import ObservationSpaceSystem, ensrf_transform, ismf_solve


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _result(name: str, passed, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=bool(passed), detail=detail)


def _random_ensemble(gen, nstate: int, nens: int, scale: float = 1.0) -> Ensemble:
    base = gen.standard_normal(nstate)
    return Ensemble(base[:, None] + scale * gen.standard_normal((nstate, nens)))


def _collect(checks) -> list:
    """Run check callables, converting exceptions into failed results."""
    out = []
    for check in checks:
        try:
            res = check()
        except Exception as exc:  # a property suite must report, not crash
            res = _result(check.__name__, False, f"raised {type(exc).__name__}: {exc}")
        out.extend(res if isinstance(res, list) else [res])
    return out


# ---------------------------------------------------------------------------
# ensemble statistics


def _ensemble_checks() -> list:
    gen = np.random.default_rng(91)
    results = []
    worst_sum = 0.0
    for _ in range(20):
        ens = _random_ensemble(gen, int(gen.integers(3, 60)), int(gen.integers(2, 20)))
        cols = deviations(ens).columns
        scale = max(1.0, float(np.abs(cols).max()))
        worst_sum = max(worst_sum, float(np.abs(cols.sum(axis=1)).max()) / scale)
    results.append(_result("ensemble.deviations_sum_to_zero", worst_sum < 1e-12,
                           f"worst relative column sum {worst_sum:.2e}"))

    ens = _random_ensemble(gen, 40, 7)
    cov = dense_sample_covariance(ens)
    sym = float(np.abs(cov - cov.T).max())
    eigval = np.linalg.eigvalsh(cov)
    results.append(_result("ensemble.dense_covariance_symmetric_psd",
                           sym == 0.0 and eigval[0] > -1e-10 * eigval[-1],
                           f"asymmetry {sym:.1e}, min eig {eigval[0]:.2e}"))
    tail = np.sort(eigval)[::-1][ens.nens - 1:]
    results.append(_result("ensemble.dense_covariance_rank_bound",
                           np.all(tail < 1e-10 * eigval[-1]),
                           f"largest beyond rank {tail.max():.2e}"))
    return results


# ---------------------------------------------------------------------------
# shrinkage estimation


def _shrinkage_checks() -> list:
    gen = np.random.default_rng(92)
    results = []

    worst = 0.0
    for _ in range(6):
        ens = _random_ensemble(gen, int(gen.integers(20, 300)), int(gen.integers(3, 25)))
        svals = deviation_singular_values(deviations(ens))
        cov = dense_sample_covariance(ens)
        t1, t2 = float(np.trace(cov)), float(np.trace(cov @ cov))
        worst = max(worst,
                    abs(np.sum(svals**2) - t1) / t1,
                    abs(np.sum(svals**4) - t2) / t2)
    results.append(_result("shrinkage.trace_identities", worst < 1e-9,
                           f"worst relative trace error {worst:.2e}"))

    ens = _random_ensemble(gen, 30, 8)
    _, gamma, _, _ = rblw_parameters(
        deviation_singular_values(deviations(ens)), ens.nstate, ens.nens)
    q, _ = np.linalg.qr(gen.standard_normal((30, 30)))
    rotated = Ensemble(q @ ens.matrix)
    _, gamma_rot, _, _ = rblw_parameters(
        deviation_singular_values(deviations(rotated)), ens.nstate, ens.nens)
    results.append(_result("shrinkage.gamma_rotation_invariant",
                           abs(gamma - gamma_rot) <= 1e-9 * max(1.0, gamma),
                           f"|gamma - rotated| = {abs(gamma - gamma_rot):.2e}"))

    cov = ShrinkageCovariance.from_ensemble(ens)
    s = cov.deviations.columns
    dense = cov.phi * np.eye(ens.nstate) + cov.delta * (s @ s.T)
    smallest = float(np.linalg.eigvalsh(dense)[0])
    results.append(_result("shrinkage.shrunk_covariance_spd",
                           cov.gamma > 0.0 and smallest >= cov.phi * (1.0 - 1e-10),
                           f"min eig {smallest:.3e} vs phi {cov.phi:.3e}"))
    return results


# ---------------------------------------------------------------------------
# synthetic sampling


def _sampling_checks() -> list:
    gen = np.random.default_rng(93)
    results = []

    nstate, nens, k = 20, 5, 200_000
    ens = _random_ensemble(gen, nstate, nens)
    devs = deviations(ens)
    cov = ShrinkageCovariance(mu=0.3 / 0.3, gamma=0.3, phi=0.3, delta=0.7, deviations=devs)
    mean = np.zeros(nstate)
    draws = draw_synthetic_members(mean, cov, k, RngStream(7, 1))
    s = devs.columns
    dense = cov.phi * np.eye(nstate) + cov.delta * (s @ s.T)
    emp = np.cov(draws)
    frob = float(np.linalg.norm(emp - dense) / np.linalg.norm(dense))
    results.append(_result("sampling.covariance_identity", frob < 0.03,
                           f"relative Frobenius error {frob:.3f} over {k} draws"))

    # regenerate the two parts from the same per-member streams
    part1 = np.empty((nstate, 4000))
    part2 = np.empty((nstate, 4000))
    stream = RngStream(7, 2)
    for i in range(part1.shape[1]):
        g = stream.member_generator(i)
        part1[:, i] = np.sqrt(cov.phi) * standard_normal(g, nstate)
        part2[:, i] = np.sqrt(cov.delta) * (s @ standard_normal(g, nens))
    cross = part1 @ part2.T / (part1.shape[1] - 1)
    scale = float(np.linalg.norm(dense))
    rel = float(np.linalg.norm(cross)) / scale
    results.append(_result("sampling.parts_uncorrelated", rel < 0.02,
                           f"cross-covariance at {rel:.3f} of signal scale"))

    again = draw_synthetic_members(mean, cov, 50, RngStream(7, 1))
    results.append(_result("sampling.deterministic_streams",
                           np.array_equal(draws[:, :50], again),
                           "first 50 draws repeat bit-for-bit"))
    return results


# ---------------------------------------------------------------------------
# observation-space solvers


def _random_spd_system(gen, nobs: int, m: int, rhs_cols: int = 3):
    q, _ = np.linalg.qr(gen.standard_normal((nobs, nobs)))
    eigs = gen.uniform(0.5, 2.0, nobs)
    gamma = (q * eigs) @ q.T
    pi = gen.standard_normal((nobs, m))
    rhs = gen.standard_normal((nobs, rhs_cols))
    inverse = np.linalg.inv(gamma)
    return gamma, inverse, pi, rhs


def _solver_checks() -> list:
    gen = np.random.default_rng(94)
    results = []

    gamma, inverse, pi, rhs = _random_spd_system(gen, 2000, 100)
    z = ismf_solve(ObservationSpaceSystem(lambda m: inverse @ m, pi, rhs))
    resid = np.linalg.norm((gamma + pi @ pi.T) @ z - rhs) / np.linalg.norm(rhs)
    results.append(_result("solvers.ismf_residual", resid < 1e-8,
                           f"relative residual {resid:.2e} at nobs=2000, m=100"))

    gamma, inverse, pi, rhs = _random_spd_system(gen, 120, 12)
    worst = 0.0
    for _ in range(10):
        perm = gen.permutation(pi.shape[1])
        z = ismf_solve(ObservationSpaceSystem(lambda m: inverse @ m, pi[:, perm], rhs))
        worst = max(worst, float(np.linalg.norm((gamma + pi @ pi.T) @ z - rhs)
                                 / np.linalg.norm(rhs)))
    results.append(_result("solvers.ismf_column_order_free", worst < 1e-8,
                           f"worst residual over 10 permutations {worst:.2e}"))

    v = gen.standard_normal((30, 6))
    r_var = gen.uniform(0.5, 1.5, 30)
    z_v = np.linalg.solve(np.diag(r_var) + v @ v.T, v)
    t = ensrf_transform(v, z_v)
    asym = float(np.abs(t - t.T).max())
    norm = float(np.linalg.norm(t, 2))
    results.append(_result("solvers.ensrf_transform_contractive",
                           asym < 1e-12 and norm <= 1.0 + 1e-10,
                           f"asymmetry {asym:.1e}, spectral norm {norm:.12f}"))
    return results


# ---------------------------------------------------------------------------
# filters


def _filter_instance(gen, nstate=12, nens=5, p=0.75):
    ens = _random_ensemble(gen, nstate, nens)
    obs = ObservationSpec.from_fraction(nstate, p, 0.1)
    truth = gen.standard_normal(nstate)
    y = obs.project(truth) + 0.1 * gen.standard_normal(obs.nobs)
    return ens, obs, y


def _filter_checks() -> list:
    gen = np.random.default_rng(95)
    results = []
    ens, obs, y = _filter_instance(gen)
    rng = RngStream(11)

    worst = 0.0
    mean_b = ens.matrix.mean(axis=1)
    zero_d = np.zeros((obs.nobs, ens.nens))
    for key in ("ensrf", "entkf", "enkf-n", "enkf-du"):
        res = filters.run_filter(key, ens, obs.project(mean_b), obs, rng)
        worst = max(worst, float(np.abs(res.analysis.matrix.mean(axis=1) - mean_b).max()))
    for fn in (filters.enkf_analysis,
               lambda e, yy, o, r, innovations: filters.enkf_fs_analysis(
                   e, yy, o, 4, r, innovations=innovations),
               lambda e, yy, o, r, innovations: filters.enkf_rs_analysis(
                   e, yy, o, 4, r, innovations=innovations)):
        res = fn(ens, y, obs, rng, innovations=zero_d)
        worst = max(worst, float(np.abs(res.analysis.matrix.mean(axis=1) - mean_b).max()))
    results.append(_result("filters.zero_innovation_fixed_point", worst < 1e-10,
                           f"worst mean shift {worst:.2e}"))

    repeat = [filters.run_filter(k, ens, y, obs, rng, synthetic_members=4).analysis.matrix
              for k in filters.FILTER_KEYS]
    again = [filters.run_filter(k, ens, y, obs, rng, synthetic_members=4).analysis.matrix
             for k in filters.FILTER_KEYS]
    identical = all(np.array_equal(a, b) for a, b in zip(repeat, again))
    results.append(_result("filters.reproducible_under_seed", identical,
                           "all seven analyses repeat bit-for-bit"))

    results.append(_result("filters.no_synthetic_members_in_output",
                           all(m.shape[1] == ens.nens for m in repeat),
                           "analysis member counts equal the background"))

    results.append(_fs_objective_check(gen))
    results.append(_rs_fs_span_check(gen))
    return results


def _fs_objective_check(gen) -> CheckResult:
    ens, obs, y = _filter_instance(gen, nstate=15, nens=6, p=0.8)
    rng = RngStream(13)
    k = 9
    res = filters.enkf_fs_analysis(ens, y, obs, k, rng)

    # rebuild the filter's internal quantities from the same streams
    cov = ShrinkageCovariance.from_ensemble(ens)
    perturbed = perturb_observations(y, obs, ens.nens, rng.child(1))
    mean_b = ens.matrix.mean(axis=1)
    synthetic = draw_synthetic_members(mean_b, cov, k, rng.child(2))
    ext = extend_ensemble(ens, synthetic)
    sdev = ext.scaled_deviations()
    bhat = cov.phi * np.eye(ens.nstate) + cov.delta * (sdev @ sdev.T)
    data = perturbed.mean(axis=1)

    def objective(x):
        dx = x - mean_b
        dy = data - obs.project(x)
        return 0.5 * dx @ np.linalg.solve(bhat, dx) + 0.5 * dy @ (dy / obs.variances)

    before = objective(mean_b)
    after = objective(res.analysis.matrix.mean(axis=1))
    return _result("filters.fs_decreases_objective",
                   after <= before + 1e-12 * abs(before),
                   f"objective {before:.6f} -> {after:.6f}")


def _rs_fs_span_check(gen) -> CheckResult:
    # with nens > nstate and k = 0 the anomaly basis spans the full space
    ens = _random_ensemble(gen, 8, 9)
    obs = ObservationSpec.from_fraction(8, 0.75, 0.1)
    y = gen.standard_normal(obs.nobs)
    rng = RngStream(17)
    fs = filters.enkf_fs_analysis(ens, y, obs, 0, rng).analysis.matrix
    rs = filters.enkf_rs_analysis(ens, y, obs, 0, rng).analysis.matrix
    gap = float(np.abs(fs - rs).max() / max(1.0, np.abs(fs).max()))
    return _result("filters.rs_equals_fs_on_full_span", gap < 1e-6,
                   f"max relative gap {gap:.2e}")


# ---------------------------------------------------------------------------
# models


def _model_checks() -> list:
    gen = np.random.default_rng(96)
    results = []
    grid = models.QgGrid(17, 17)
    # zero-flux fields: the integral identities hold only without a
    # discrete boundary flux, so taper the outermost interior ring
    psi = np.zeros((grid.d1, grid.d2))
    omega = np.zeros((grid.d1, grid.d2))
    psi[1:-1, 1:-1] = gen.standard_normal((grid.d1 - 2, grid.d2 - 2))
    omega[1:-1, 1:-1] = gen.standard_normal((grid.d1 - 2, grid.d2 - 2))
    jac = models.arakawa_jacobian(psi, omega, grid)
    scale = float(np.abs(jac).max())
    full_psi = gen.standard_normal((grid.d1, grid.d2))
    full_omega = gen.standard_normal((grid.d1, grid.d2))
    full_jac = models.arakawa_jacobian(full_psi, full_omega, grid)
    sums = (abs(jac.sum()) / scale,
            abs((full_psi * full_jac).sum()) / float(np.abs(full_jac).max()),
            abs((full_omega * full_jac).sum()) / float(np.abs(full_jac).max()))
    worst = max(s / grid.nstate for s in sums)
    results.append(_result("models.arakawa_conservation", worst < 1e-10,
                           f"worst normalized conservation sum {worst:.2e}"))

    w1 = gen.standard_normal((grid.d1, grid.d2))
    w2 = gen.standard_normal((grid.d1, grid.d2))
    lhs = models.poisson_solve(2.0 * w1 - 3.0 * w2, grid)
    rhs = 2.0 * models.poisson_solve(w1, grid) - 3.0 * models.poisson_solve(w2, grid)
    lin = float(np.abs(lhs - rhs).max() / max(1e-30, np.abs(lhs).max()))
    results.append(_result("models.poisson_linear", lin < 1e-10,
                           f"relative linearity defect {lin:.2e}"))

    model = models.get_model("qg-33")
    state = model.initial_state()
    for _ in range(1000):
        state = model.step(state)
    results.append(_result("models.qg33_stable_1000_steps",
                           np.all(np.isfinite(state)),
                           f"final max |vorticity| {np.abs(state).max():.3f}"))

    def err(dt):
        x = np.array([1.0])
        steps = int(round(1.0 / dt))
        for _ in range(steps):
            x = models.rk4_step(lambda s: -s, x, dt)
        return abs(float(x[0]) - np.exp(-1.0))

    ratio = err(0.1) / err(0.05)
    results.append(_result("models.rk4_fourth_order", 14.0 <= ratio <= 18.0,
                           f"error ratio under halved dt {ratio:.2f}"))
    return results


# ---------------------------------------------------------------------------
# harness


def _base_config(filter_key="ensrf", model="l96-8", nens=4, cycles=3):
    return harness.ExperimentConfig(
        model=model, filter=filter_key, nens=nens, p=0.75, sigma_b=0.1,
        n_cycles=cycles, rng_seed=20_25, synthetic_ratio=2.0)


def _run_csv_rows(cfg) -> list:
    """Run CSV rows with the wall-clock column masked (it is a measurement)."""
    res = harness.run_twin_experiment(cfg)
    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "run.csv")
        harness.write_run_csv(res, path)
        with open(path, "r", encoding="utf-8") as fh:
            rows = [line.split(",") for line in fh.read().splitlines()]
    return [cells[:2] + cells[3:] for cells in rows]


def _harness_checks() -> list:
    results = []
    cfg = _base_config()
    results.append(_result("harness.run_reproducible",
                           _run_csv_rows(cfg) == _run_csv_rows(cfg),
                           "identical config and seed give identical numbers"))

    model = models.get_model(cfg.model)
    obs = ObservationSpec.from_fraction(model.nstate, cfg.p, cfg.obs_std)
    t0a, ta, oa = harness.build_truth_and_observations(cfg, model, obs)
    t0b, tb, ob = harness.build_truth_and_observations(cfg, model, obs)
    shared = (np.array_equal(t0a, t0b)
              and all(np.array_equal(x, y) for x, y in zip(ta, tb))
              and all(np.array_equal(x, y) for x, y in zip(oa, ob)))
    results.append(_result("harness.shared_truth_and_observations", shared,
                           "paired comparisons reuse one realization"))

    finite = True
    detail = []
    for key in filters.FILTER_KEYS:
        res = harness.run_twin_experiment(_base_config(filter_key=key))
        finite = finite and np.isfinite(res.total_rmse)
        detail.append(f"{key}={res.total_rmse:.3f}")
    results.append(_result("harness.all_filters_finite_rmse", finite,
                           " ".join(detail)))
    return results


def run_all() -> list:
    """Execute the full property suite; returns one result per invariant."""
    return _collect([
        _ensemble_checks, _shrinkage_checks, _sampling_checks,
        _solver_checks, _filter_checks, _model_checks, _harness_checks,
    ])
