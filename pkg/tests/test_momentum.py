import numpy as np
import pytest

from csnt.constitutive import RegularizationParams, rational_model
from csnt.errors import MaxIterationsExceeded
from csnt.fields import (
    Grid,
    ScalarField,
    VectorField,
    component_means,
    jacobian,
    laplacian_power,
    lp_norm,
)
from csnt.momentum import (
    MomentumProblem,
    energy,
    energy_gradient,
    energy_identity_terms,
    solve_momentum,
)
from conftest import band_limited_vector


@pytest.fixture(scope="module")
def model():
    return rational_model(gamma=2.0)


@pytest.fixture(scope="module")
def params():
    return RegularizationParams(delta=1e-3, epsilon=1e-4, m=2, beta=4)


def _zero_velocity(grid):
    return VectorField(grid, np.zeros((grid.dim,) + grid.shape))


def _ip(grid, a, b):
    return float(np.mean(np.sum(a.values * b.values, axis=0))) * grid.volume


def test_energy_zero_velocity(model, params, grid32):
    x1, _ = grid32.meshes()
    for datum in (np.ones(grid32.shape), 1.0 + 0.5 * np.cos(x1)):
        prob = MomentumProblem(model, params, ScalarField(grid32, datum))
        assert energy(prob, _zero_velocity(grid32)) == 0.0


def test_constant_datum_zero_is_minimizer(model, params, grid32):
    prob = MomentumProblem(model, params, ScalarField(grid32, np.full(grid32.shape, 2.0)))
    for seed in range(4):
        v = band_limited_vector(grid32, seed=seed)
        assert energy(prob, v) >= 0.0


def test_energy_term_lower_bound(model, params, grid32):
    x1, _ = grid32.meshes()
    prob = MomentumProblem(model, params, ScalarField(grid32, 1.0 + 0.5 * np.cos(x1)))
    for seed in range(3):
        v = band_limited_vector(grid32, seed=40 + seed, amplitude=2.0)
        from csnt.fields import divergence, dealias

        grad_sq = lp_norm(jacobian(v), 2) ** 2
        dm = lp_norm(laplacian_power(v, params.m), 2) ** 2
        work = float(np.mean(dealias(prob.rho_gamma).values
                             * divergence(v).values)) * grid32.volume
        lower = 0.5 * params.epsilon * dm + 0.5 * grad_sq - work
        assert energy(prob, v) >= lower - 1e-10


def test_gradient_examples(model, params, grid32):
    x1, _ = grid32.meshes()
    prob_c = MomentumProblem(model, params, ScalarField(grid32, np.full(grid32.shape, 3.0)))
    g0 = energy_gradient(prob_c, _zero_velocity(grid32))
    assert np.max(np.abs(g0.values)) < 1e-14

    prob = MomentumProblem(model, params, ScalarField(grid32, 1.0 + np.cos(x1)))
    g = energy_gradient(prob, _zero_velocity(grid32))
    assert np.max(np.abs(g.values[0] + np.sin(x1))) < 1e-12
    assert np.max(np.abs(g.values[1])) < 1e-13


def test_gradient_fd_consistency(model, params, grid32):
    x1, _ = grid32.meshes()
    prob = MomentumProblem(model, params, ScalarField(grid32, 1.0 + 0.5 * np.cos(x1)))
    v = band_limited_vector(grid32, seed=3)
    w = band_limited_vector(grid32, seed=4)
    h = 1e-5
    # Richardson-extrapolated central difference
    d1 = (energy(prob, VectorField(grid32, v.values + h * w.values))
          - energy(prob, VectorField(grid32, v.values - h * w.values))) / (2 * h)
    d2 = (energy(prob, VectorField(grid32, v.values + 2 * h * w.values))
          - energy(prob, VectorField(grid32, v.values - 2 * h * w.values))) / (4 * h)
    fd = (4.0 * d1 - d2) / 3.0
    ip = _ip(grid32, energy_gradient(prob, v), w)
    assert fd == pytest.approx(ip, rel=1e-6)


def test_constant_datum_converges_immediately(model, params, grid32):
    prob = MomentumProblem(model, params, ScalarField(grid32, np.full(grid32.shape, 2.0)))
    sol = solve_momentum(prob)
    assert sol.iterations <= 1
    assert np.max(np.abs(sol.u.values)) == 0.0


def test_manufactured_solution(model, params):
    grid = Grid(2, 32)
    x1, x2 = grid.meshes()
    ustar = VectorField(grid, np.stack([np.sin(x2), np.sin(x1)]))
    base = MomentumProblem(model, params, ScalarField(grid, np.ones(grid.shape)))
    fstar = energy_gradient(base, ustar)
    prob = MomentumProblem(model, params, ScalarField(grid, np.ones(grid.shape)),
                           forcing=fstar)
    sol = solve_momentum(prob, tol=1e-10)
    assert np.max(np.abs(sol.u.values - ustar.values)) < 1e-8


def test_descent_and_mean_zero(model, params, grid64):
    x1, _ = grid64.meshes()
    prob = MomentumProblem(model, params,
                           ScalarField(grid64, (1.0 + 0.3 * np.cos(x1)) ** 2))
    energies = []
    sol = solve_momentum(prob, diag=lambda it, e, r: energies.append(e))
    diffs = np.diff(energies)
    assert np.all(diffs <= 1e-14 * (1.0 + np.abs(np.asarray(energies[:-1]))))
    assert np.max(np.abs(component_means(sol.u))) < 1e-12


def test_energy_identity(model, params, grid64):
    x1, _ = grid64.meshes()
    prob = MomentumProblem(model, params,
                           ScalarField(grid64, (1.0 + 0.3 * np.cos(x1)) ** 2))
    sol = solve_momentum(prob)
    terms = energy_identity_terms(prob, sol.u)
    assert terms["residual_rel"] < 1e-6
    assert terms["shear"] >= 0 and terms["bulk_lambda"] >= 0


def test_uniqueness_proxy(model, params, grid64):
    x1, _ = grid64.meshes()
    tol = 1e-10
    prob = MomentumProblem(model, params,
                           ScalarField(grid64, (1.0 + 0.3 * np.cos(x1)) ** 2))
    s1 = solve_momentum(prob, tol=tol, initial_guess=band_limited_vector(grid64, 21))
    s2 = solve_momentum(prob, tol=tol, initial_guess=band_limited_vector(grid64, 22))
    gap = lp_norm(VectorField(grid64, s1.u.values - s2.u.values), 2)
    assert gap <= 10 * tol


def test_contraction_estimate(model, params, grid32):
    x1, _ = grid32.meshes()
    d1 = ScalarField(grid32, (1.0 + 0.3 * np.cos(x1)) ** 2)
    d2 = ScalarField(grid32, (1.0 + 0.2 * np.cos(x1)) ** 2)
    s1 = solve_momentum(MomentumProblem(model, params, d1), tol=1e-11)
    s2 = solve_momentum(MomentumProblem(model, params, d2), tol=1e-11)
    grad_gap = lp_norm(jacobian(VectorField(grid32, s1.u.values - s2.u.values)), 2)
    datum_gap = lp_norm(ScalarField(grid32, d1.values - d2.values), 2)
    # |div w| <= sqrt(d) |grad w| pointwise gives the sqrt(d) constant
    assert grad_gap <= np.sqrt(2.0) * datum_gap * (1.0 + 1e-9)


def test_energy_estimate_tracked_in_resolution(model, params):
    ratios = []
    for n in (32, 64):
        grid = Grid(2, n)
        x1, _ = grid.meshes()
        datum = ScalarField(grid, 1.0 + 0.5 * np.cos(x1))
        sol = solve_momentum(MomentumProblem(model, params, datum))
        cert = sol.certificate
        ratios.append(cert.grad_u_l2 / cert.datum_l2)
        assert cert.u_w1inf is not None
    assert ratios[1] <= ratios[0] * (1.0 + 1e-6)


def test_energy_estimate_tracked_over_datum_sweep(model, params):
    # ||grad u|| <= C ||datum||_L2 with one C across a datum amplitude sweep
    grid = Grid(2, 32)
    x1, _ = grid.meshes()
    ratios = []
    for amp in (0.1, 0.25, 0.5, 0.75):
        datum = ScalarField(grid, 1.0 + amp * np.cos(x1))
        cert = solve_momentum(MomentumProblem(model, params, datum)).certificate
        ratios.append(cert.grad_u_l2 / cert.datum_l2)
        assert cert.sqrt_eps_delta_m_u_l2 <= np.sqrt(2.0) * cert.datum_l2
    assert max(ratios) <= 1.0  # the a priori constant, measured well below 1


def test_formal_limit_mode(model, grid32):
    x1, _ = grid32.meshes()
    params0 = RegularizationParams(delta=1e-3, epsilon=0.0, m=2, beta=4)
    prob = MomentumProblem(model, params0,
                           ScalarField(grid32, (1.0 + 0.3 * np.cos(x1)) ** 2))
    sol = solve_momentum(prob)
    assert sol.certificate.u_w1inf is None
    assert sol.certificate.sqrt_eps_delta_m_u_l2 == 0.0
    terms = energy_identity_terms(prob, sol.u)
    assert terms["residual_rel"] < 1e-6


def test_max_iterations_carries_best(model, params, grid32):
    x1, _ = grid32.meshes()
    prob = MomentumProblem(model, params, ScalarField(grid32, 1.0 + np.cos(x1)))
    with pytest.raises(MaxIterationsExceeded) as err:
        solve_momentum(prob, tol=1e-13, max_iter=2)
    best = err.value.best
    assert best is not None and best.iterations == 2
    assert np.isfinite(best.residual_norm)


def test_negative_datum_rejected(model, params, grid32):
    vals = np.ones(grid32.shape)
    vals[0, 0] = -1.0
    with pytest.raises(ValueError):
        MomentumProblem(model, params, ScalarField(grid32, vals))
