"""Acceptance suite: every exit criterion at its stated tolerance.

Each criterion prints one `ACCEPTANCE n [...]: PASS/FAIL` line (run with
`pytest -s` to see them live) and asserts its runtime budget.  Heavy
trajectories are built once and shared; their cost is charged to the first
criterion that needs them (the ladder belongs to criterion 8, which is why
it is defined before criterion 7 here).
"""

import functools
import time
from contextlib import contextmanager

import numpy as np
import pytest

from csnt.benchmarks import (
    BENCHMARK_DELTAS,
    ladder_epsilons,
    smooth_benchmark,
    smooth_initial_density,
)
from csnt.constitutive import (
    RegularizationParams,
    certify_bound,
    lambda_eval,
    monotonicity_gap,
    mu0_eval,
    potential_F,
    potential_Lambda,
    rational_model,
)
from csnt.continuity import ContinuityStepper, exact_constant_decay, solve_continuity
from csnt.coupling import (
    ladder_defect_series,
    regularization_ladder,
    solve_fixed_point,
    trajectory_distance,
)
from csnt.diagnostics import (
    TruncationOperator,
    bogovskii_pressure_test,
    cz_flux,
    effective_viscous_flux,
    flux_bmo_certificate,
    gronwall_compare,
    renormalized_identity_residual,
)
from csnt.fields import Grid, ScalarField, VectorField, lp_norm
from csnt.fixtures import gronwall_constant, load_fixtures, logeq_family_ratios
from csnt.momentum import (
    MomentumProblem,
    energy_gradient,
    energy_identity_terms,
    solve_momentum,
)
from conftest import band_limited_vector

MOMENTUM_TOL = 1e-9
FP_TOL = 1e-8


@contextmanager
def criterion(num: int, label: str, budget_s: float):
    t0 = time.perf_counter()
    try:
        yield
    except Exception:
        print(f"\nACCEPTANCE {num} [{label}]: FAIL "
              f"({time.perf_counter() - t0:.1f}s)")
        raise
    elapsed = time.perf_counter() - t0
    print(f"\nACCEPTANCE {num} [{label}]: PASS ({elapsed:.1f}s)")
    assert elapsed < budget_s, f"criterion {num} exceeded its {budget_s:.0f}s budget"


@functools.lru_cache(maxsize=None)
def bench_perstep():
    config, rho0 = smooth_benchmark(mode="per_step")
    return config, solve_fixed_point(config, rho0)


@functools.lru_cache(maxsize=None)
def bench_global():
    config, rho0 = smooth_benchmark(mode="global")
    return config, solve_fixed_point(config, rho0)


@functools.lru_cache(maxsize=None)
def bench_gamma_one():
    config, rho0 = smooth_benchmark(gamma=1.0)
    return config, solve_fixed_point(config, rho0)


@functools.lru_cache(maxsize=None)
def bench_n128():
    config, rho0 = smooth_benchmark(n=128)
    return config, solve_fixed_point(config, rho0)


@functools.lru_cache(maxsize=None)
def bench_half_delta():
    config, rho0 = smooth_benchmark(delta=5e-4, epsilon=5e-5)
    return config, solve_fixed_point(config, rho0)


@functools.lru_cache(maxsize=None)
def bench_ladder():
    config, rho0 = smooth_benchmark()
    deltas = list(BENCHMARK_DELTAS)
    return config, regularization_ladder(config, rho0, deltas,
                                         ladder_epsilons(deltas))


@functools.lru_cache(maxsize=None)
def pk_halving_pair():
    out = []
    for dt in (1e-3, 5e-4):
        config, rho0 = smooth_benchmark(T=0.1, dt=dt)
        out.append((config, solve_fixed_point(config, rho0)))
    return out


def test_criterion_1_constitutive_oracles():
    with criterion(1, "constitutive oracles", 10.0):
        model = rational_model(gamma=2.0)
        rng = np.random.default_rng(101)
        h = 1e-5
        # finite-difference gradient of F against mu0(|B|) B, 1000 inputs
        for trial in range(1000):
            d = 2 if trial % 2 == 0 else 3
            a = rng.standard_normal((d, d)) * rng.uniform(0.1, 5.0)
            B = 0.5 * (a + a.T)
            target = mu0_eval(model, np.linalg.norm(B)) * B
            i, j = rng.integers(0, d, size=2)
            Bp = B.copy(); Bp[i, j] += h
            Bm = B.copy(); Bm[i, j] -= h
            fd = (potential_F(model, np.linalg.norm(Bp))
                  - potential_F(model, np.linalg.norm(Bm))) / (2 * h)
            assert abs(fd - target[i, j]) <= 1e-6 * max(abs(target[i, j]), 1e-3)
        # Lambda' against s + lambda(|s|) s on 1000 inputs (vectorized)
        s = rng.uniform(-6.0, 6.0, size=1000)
        fd = (potential_Lambda(model, s + h) - potential_Lambda(model, s - h)) / (2 * h)
        target = s + np.sign(s) * lambda_eval(model, np.abs(s)) * np.abs(s)
        assert np.max(np.abs(fd - target) / np.maximum(np.abs(target), 1e-3)) <= 1e-6

        # monotonicity gap on 1e5 random pairs
        A = rng.standard_normal((100000, 2, 2)) * 3.0
        B2 = rng.standard_normal((100000, 2, 2)) * 3.0
        A = 0.5 * (A + np.swapaxes(A, -2, -1))
        B2 = 0.5 * (B2 + np.swapaxes(B2, -2, -1))
        assert monotonicity_gap(model, A, B2).min() >= -1e-12

        worst, ok = certify_bound(model, 1e-6, 1e6)
        assert ok, f"z*mu0(z) reached {worst} > C"


def test_criterion_2_momentum_solver():
    with criterion(2, "momentum solver", 60.0):
        grid = Grid(2, 64)
        x1, x2 = grid.meshes()
        model = rational_model(gamma=2.0)
        params = RegularizationParams(delta=1e-3, epsilon=1e-4, m=2, beta=4)

        # manufactured solution at n = 64
        ustar = VectorField(grid, np.stack([np.sin(x2), np.sin(x1)]))
        base = MomentumProblem(model, params, ScalarField(grid, np.ones(grid.shape)))
        fstar = energy_gradient(base, ustar)
        prob_mms = MomentumProblem(model, params,
                                   ScalarField(grid, np.ones(grid.shape)),
                                   forcing=fstar)
        sol_mms = solve_momentum(prob_mms, tol=MOMENTUM_TOL)
        assert np.max(np.abs(sol_mms.u.values - ustar.values)) <= 1e-8

        # constant datum: u = 0 in <= 1 iteration
        sol_const = solve_momentum(
            MomentumProblem(model, params, ScalarField(grid, np.full(grid.shape, 2.0)))
        )
        assert sol_const.iterations <= 1
        assert np.max(np.abs(sol_const.u.values)) == 0.0

        # energy identity at every converged solve of this criterion
        datum = ScalarField(grid, (1.0 + 0.3 * np.cos(x1)) ** 2)
        prob = MomentumProblem(model, params, datum)
        s1 = solve_momentum(prob, tol=MOMENTUM_TOL,
                            initial_guess=band_limited_vector(grid, 7))
        s2 = solve_momentum(prob, tol=MOMENTUM_TOL,
                            initial_guess=band_limited_vector(grid, 8))
        for p, s in ((prob_mms, sol_mms), (prob, s1), (prob, s2)):
            assert energy_identity_terms(p, s.u)["residual_rel"] <= 1e-6

        # two random initial guesses agree within 10 tol
        gap = lp_norm(VectorField(grid, s1.u.values - s2.u.values), 2)
        assert gap <= 10 * MOMENTUM_TOL


def test_criterion_3_continuity_solver():
    with criterion(3, "continuity solver", 60.0):
        grid = Grid(2, 32)
        x1, x2 = grid.meshes()
        zero_u = VectorField(grid, np.zeros((2,) + grid.shape))

        # constant-state decay against the exact separable solution
        params = RegularizationParams(delta=0.1, epsilon=0.0, m=2, beta=4)
        stepper = ContinuityStepper(params, dt=1e-4)
        traj = solve_continuity(ScalarField(grid, np.ones(grid.shape)),
                                lambda t: zero_u, 1.0, stepper)
        exact = exact_constant_decay(1.0, 0.1, 4, traj.times)
        measured = traj.series["mass"] / grid.volume
        assert np.max(np.abs(measured - exact)) <= 1e-6
        assert traj.clamp_events == 0

        # divergence-free transport conserves the L^p norms
        u_df = VectorField(grid, np.stack([np.sin(x2), np.zeros(grid.shape)]))
        stepper2 = ContinuityStepper(RegularizationParams(0.0, 0.0, 2, 4), dt=1e-3)
        traj2 = solve_continuity(ScalarField(grid, 1.0 + 0.3 * np.cos(x1)),
                                 lambda t: u_df, 1.0, stepper2)
        for p in (1.0, 2.0, 4.0):
            series = traj2.series[f"l{p:g}"]
            assert np.max(np.abs(series - series[0])) / series[0] <= 1e-6
        assert traj2.clamp_events == 0

        # zero clamp events on the coupled benchmark as well
        _, bench = bench_perstep()
        assert bench.clamp_events == 0


def test_criterion_4_coupled_solve():
    with criterion(4, "coupled fixed point", 600.0):
        cfg_g, traj_g = bench_global()
        res = traj_g.fixed_point_residuals
        assert res[-1] < FP_TOL
        assert len(res) <= 50
        assert np.all(np.diff(res) < 0), "fixed-point residuals not monotone"
        assert traj_g.flags == []

        cfg_p, traj_p = bench_perstep()
        dist = trajectory_distance(traj_p.rho, traj_g.rho, 2.0 * cfg_p.model.gamma)
        assert dist <= 5 * FP_TOL

        for _, traj in (bench_perstep(), bench_global()):
            assert np.all(np.diff(traj.series["energy"]) <= 1e-8)

        _, traj_1 = bench_gamma_one()
        assert np.all(np.diff(traj_1.series["energy"]) <= 1e-8)


def test_criterion_5_effective_flux_certificates():
    with criterion(5, "effective viscous flux certificates", 300.0):
        cfg, traj = bench_perstep()
        rep = bogovskii_pressure_test(traj, cfg.model, cfg.params, theta=2.0)
        assert rep["divpsi_residual_max"] <= 1e-10

        worst = 0.0
        for r, v in zip(traj.rho, traj.u):
            evf = effective_viscous_flux(v, r, cfg.model)
            zm = evf.values - np.mean(evf.values)
            worst = max(worst, float(np.max(np.abs(
                zm - cz_flux(v, cfg.model, cfg.params).values))))
        assert worst <= 1e-6

        base = flux_bmo_certificate(traj, cfg.model)["bmo_sup"]
        cfg128, traj128 = bench_n128()
        fine = flux_bmo_certificate(traj128, cfg128.model)["bmo_sup"]
        assert abs(fine - base) / base <= 0.10, "BMO moved > 10% with resolution"
        cfg_h, traj_h = bench_half_delta()
        halved = flux_bmo_certificate(traj_h, cfg_h.model)["bmo_sup"]
        assert abs(halved - base) / base <= 0.10, "BMO moved > 10% with delta/2"


def test_criterion_6_log_inequality_harness():
    with criterion(6, "logarithmic inequality harness", 60.0):
        fixtures = load_fixtures()
        bound = fixtures["logeq_ratio_bound"]
        ratios = logeq_family_ratios(64)
        assert set(ratios) == {"powers", "shrinking", "concentrating"}
        for name, val in ratios.items():
            assert val <= bound, f"family {name}: ratio {val} > pinned {bound}"


def test_criterion_8_regularization_ladder():
    with criterion(8, "regularization ladder", 1800.0):
        cfg, report = bench_ladder()
        assert all(r.error is None for r in report.rungs)
        d = report.rho_distances
        assert d[0] > d[1] > 0, "trajectory distances not monotone down the ladder"
        eps_certs = [r.sqrt_eps_delta_m_u for r in report.rungs]
        rho_certs = [r.sqrt_delta_grad_rho for r in report.rungs]
        for certs in (eps_certs, rho_certs):
            cap = 10.0 * certs[0] + 1e-12
            assert all(c <= cap for c in certs), "certificate not rung-uniform"


def test_criterion_7_truncation_and_gronwall():
    with criterion(7, "truncation identities and gronwall", 120.0):
        cfg, traj = bench_perstep()
        op1 = TruncationOperator(1.0)
        rr = renormalized_identity_residual(traj, op1, 2.0, cfg.model, cfg.params)
        assert rr["residual_rel"].max() <= 1e-5

        (cfg_a, traj_a), (cfg_b, traj_b) = pk_halving_pair()
        ra = renormalized_identity_residual(traj_a, op1, 2.0, cfg_a.model,
                                            cfg_a.params)["residual_rel"].max()
        rb = renormalized_identity_residual(traj_b, op1, 2.0, cfg_b.model,
                                            cfg_b.params)["residual_rel"].max()
        assert rb <= 0.65 * ra, f"residual did not halve: {ra} -> {rb}"

        # T_k / P_k monotone limits on the k ladder
        grid = Grid(2, 64)
        rho = smooth_initial_density(grid, amplitude=1.0).values  # 1 + cos x1
        zs = np.linspace(0.0, 10.0, 2001)
        p = 2.0
        ints, prev_t = [], None
        for k in (1.0, 2.0, 4.0, 8.0):
            op = TruncationOperator(k)
            tz = op(zs)
            assert np.all(tz <= np.minimum(zs, k + 1.0) + 1e-12)
            if prev_t is not None:
                assert np.all(prev_t <= tz + 1e-12)
            prev_t = tz
            ints.append(float(np.mean(op.pk(p, rho))))
        limit = float(np.mean(rho ** p)) / (p - 1.0)
        assert np.all(np.diff(ints) >= -1e-15)
        assert ints[-1] == pytest.approx(limit, rel=1e-12)

        # gronwall: the trivial series and the measured ladder defect
        fixtures = load_fixtures()
        t = np.linspace(0.0, 1.0, 101)
        assert gronwall_compare(t, np.zeros_like(t), C=1.0).verdict == "PASS"

        _, report = bench_ladder()
        gamma = cfg.model.gamma
        y = ladder_defect_series(report, 1, 2, gamma)
        times = report.rungs[-1].trajectory.times
        C = gronwall_constant(
            flux_bmo_certificate(report.rungs[-1].trajectory, cfg.model))
        verdict = gronwall_compare(times, y, C, tol=fixtures["gronwall_defect_tol"])
        assert verdict.verdict == "PASS"
