import numpy as np
import pytest
from scipy.integrate import quad

from csnt.constitutive import (
    ConstitutiveModel,
    RegularizationParams,
    build_model,
    certify_bound,
    default_beta,
    herschel_bulkley_model,
    lambda_eval,
    monotonicity_gap,
    mu0_eval,
    potential_F,
    potential_Lambda,
    pressure,
    rational_model,
    stress,
)
from csnt.errors import ConfigError
from csnt.fields import Grid, ScalarField, TensorField


@pytest.fixture(scope="module")
def model():
    return rational_model(gamma=2.0)


def test_rational_values(model):
    assert mu0_eval(model, 0.0) == 1.0
    assert mu0_eval(model, 1.0) == 0.5
    # tau/(a+z) <= C/z with C = tau
    assert mu0_eval(model, 10.0) == pytest.approx(1.0 / 11.0)
    assert mu0_eval(model, 10.0) <= model.bound_constant / 10.0
    with pytest.raises(ValueError):
        mu0_eval(model, -1.0)
    with pytest.raises(ValueError):
        lambda_eval(model, np.array([0.5, -0.5]))


def test_potential_values(model):
    assert potential_F(model, 0.0) == 0.0
    oracle = quad(lambda s: s / (1.0 + s), 0.0, 1.0, epsabs=1e-12)[0]
    assert potential_F(model, 1.0) == pytest.approx(oracle, abs=1e-10)
    assert potential_F(model, 1.0) == pytest.approx(1.0 - np.log(2.0), abs=1e-12)

    assert potential_Lambda(model, 0.0) == 0.0
    oracle_l = quad(lambda t: t + t / (1.0 + t), 0.0, 1.0, epsabs=1e-12)[0]
    assert potential_Lambda(model, 1.0) == pytest.approx(oracle_l, abs=1e-10)
    s = np.linspace(-3, 3, 41)
    assert np.allclose(potential_Lambda(model, s), potential_Lambda(model, -s))


def test_potential_derivative_fd(model):
    h = 1e-5
    fd = (potential_F(model, 2.0 + h) - potential_F(model, 2.0 - h)) / (2 * h)
    assert fd == pytest.approx(mu0_eval(model, 2.0) * 2.0, abs=1e-8)


def test_generic_quadrature_fallback():
    # a model without closed-form primitives goes through adaptive quadrature
    m = ConstitutiveModel(
        name="custom",
        mu0=lambda z: 1.0 / (1.0 + z) ** 2,
        lam=lambda z: 1.0 / (1.0 + z) ** 2,
        bound_constant=1.0,
        gamma=2.0,
    )
    oracle = quad(lambda s: s / (1.0 + s) ** 2, 0.0, 2.0, epsabs=1e-12)[0]
    assert potential_F(m, 2.0) == pytest.approx(oracle, abs=1e-9)


def test_stress(model):
    grid = Grid(2, 8)
    zero = TensorField(grid, np.zeros((2, 2) + grid.shape))
    assert np.max(np.abs(stress(model, zero).values)) == 0.0

    vals = np.zeros((2, 2) + grid.shape)
    vals[0, 0] = 1.0
    S = stress(model, TensorField(grid, vals))
    assert np.max(np.abs(S.values[0, 0] - 0.5)) < 1e-14
    assert np.max(np.abs(S.values[1, 1])) == 0.0

    rng = np.random.default_rng(2)
    a = rng.standard_normal((2, 2) + grid.shape) * 10.0
    sym = TensorField(grid, 0.5 * (a + np.swapaxes(a, 0, 1)))
    S = stress(model, sym)
    frob = np.sqrt(np.sum(S.values ** 2, axis=(0, 1)))
    assert np.all(frob <= model.bound_constant + 1e-12)


def test_gradient_consistency_of_F(model):
    # (F(B + h e_ij) - F(B - h e_ij)) / 2h matches mu0(|B|) b_ij
    rng = np.random.default_rng(7)
    h = 1e-5
    for _ in range(50):
        a = rng.standard_normal((2, 2))
        B = 0.5 * (a + a.T)
        nb = np.linalg.norm(B)
        target = mu0_eval(model, nb) * B
        for i in range(2):
            for j in range(2):
                Bp = B.copy(); Bp[i, j] += h
                Bm = B.copy(); Bm[i, j] -= h
                fd = (potential_F(model, np.linalg.norm(Bp))
                      - potential_F(model, np.linalg.norm(Bm))) / (2 * h)
                assert fd == pytest.approx(target[i, j], rel=1e-6, abs=1e-8)


def test_lambda_prime_consistency(model):
    rng = np.random.default_rng(8)
    h = 1e-5
    s = rng.uniform(-4.0, 4.0, size=200)
    fd = (potential_Lambda(model, s + h) - potential_Lambda(model, s - h)) / (2 * h)
    target = s + np.sign(s) * lambda_eval(model, np.abs(s)) * np.abs(s)
    assert np.max(np.abs(fd - target) / np.maximum(np.abs(target), 1e-8)) < 1e-6


def test_bound_certification(model):
    worst, ok = certify_bound(model)
    assert ok and worst <= model.bound_constant + 1e-12


def test_midpoint_convexity(model):
    rng = np.random.default_rng(9)
    r = rng.uniform(0.0, 10.0, size=(300, 2))
    mid = 0.5 * (r[:, 0] + r[:, 1])
    f = 0.5 * (potential_F(model, r[:, 0]) + potential_F(model, r[:, 1]))
    assert np.all(potential_F(model, mid) <= f + 1e-12)
    s = rng.uniform(-10.0, 10.0, size=(300, 2))
    mid = 0.5 * (s[:, 0] + s[:, 1])
    l = 0.5 * (potential_Lambda(model, s[:, 0]) + potential_Lambda(model, s[:, 1]))
    assert np.all(potential_Lambda(model, mid) <= l + 1e-12)


def test_monotonicity_gap(model):
    B = np.array([[1.0, 0.2], [0.2, -0.4]])
    assert monotonicity_gap(model, B, B) == 0.0
    B1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert monotonicity_gap(model, B1, np.zeros((2, 2))) == pytest.approx(0.5)

    rng = np.random.default_rng(10)
    A = rng.standard_normal((100000, 2, 2)) * 3.0
    Bv = rng.standard_normal((100000, 2, 2)) * 3.0
    A = 0.5 * (A + np.swapaxes(A, -2, -1))
    Bv = 0.5 * (Bv + np.swapaxes(Bv, -2, -1))
    gaps = monotonicity_gap(model, A, Bv)
    assert gaps.min() >= -1e-12


def test_pressure(model):
    grid = Grid(2, 8)
    three = ScalarField(grid, np.full(grid.shape, 3.0))
    assert np.max(np.abs(pressure(model, three).values - 9.0)) < 1e-12

    m1 = rational_model(gamma=1.0)
    rng = np.random.default_rng(3)
    rho = ScalarField(grid, rng.uniform(0.0, 5.0, grid.shape))
    assert np.array_equal(pressure(m1, rho).values, rho.values)

    m14 = rational_model(gamma=1.4)
    two = ScalarField(grid, np.full(grid.shape, 2.0))
    oracle = np.exp(1.4 * np.log(2.0))
    assert np.max(np.abs(pressure(m14, two).values - oracle)) < 1e-12

    bad = rho.values.copy()
    bad[3, 4] = -0.25
    with pytest.raises(ValueError, match=r"\(3, 4\)"):
        pressure(model, ScalarField(grid, bad))


def test_herschel_bulkley():
    hb = herschel_bulkley_model(gamma=2.0, tau=1.0, threshold=0.1)
    # continuity at the threshold and the C/z envelope
    assert mu0_eval(hb, 0.1) == pytest.approx(10.0)
    assert mu0_eval(hb, 0.05) == pytest.approx(10.0)
    worst, ok = certify_bound(hb)
    assert ok
    # potentials against quadrature, away from the threshold kink
    oracle = quad(lambda s: hb.mu0(s) * s, 0.0, 2.0, epsabs=1e-12)[0]
    assert potential_F(hb, 2.0) == pytest.approx(oracle, abs=1e-10)
    rng = np.random.default_rng(4)
    A = rng.standard_normal((20000, 2, 2))
    B = rng.standard_normal((20000, 2, 2))
    A = 0.5 * (A + np.swapaxes(A, -2, -1))
    B = 0.5 * (B + np.swapaxes(B, -2, -1))
    assert monotonicity_gap(hb, A, B).min() >= -1e-12
    with pytest.raises(ConfigError):
        herschel_bulkley_model(gamma=2.0, threshold=0.0)


def test_model_building():
    with pytest.raises(ConfigError):
        build_model("maxwell", gamma=2.0)
    with pytest.raises(ConfigError):
        rational_model(gamma=2.0, a=0.0)  # singular model rejected
    with pytest.raises(ConfigError):
        rational_model(gamma=0.5)


def test_regularization_params():
    with pytest.raises(ConfigError):
        RegularizationParams(1e-3, 1e-4, 2, 5)  # odd beta
    with pytest.raises(ConfigError):
        RegularizationParams(1e-3, 1e-4, 0, 4)
    p = RegularizationParams(1e-3, 1e-4, 1, 4)
    with pytest.raises(ConfigError):
        p.validate_for(gamma=2.0, dim=2)  # 2m-1 = 1, needs > d/2 = 1
    p.validate_for(gamma=2.0, dim=1)
    p4 = RegularizationParams(1e-3, 1e-4, 2, 4)
    with pytest.raises(ConfigError):
        p4.validate_for(gamma=4.0, dim=2)  # beta < gamma + 1
    assert default_beta(2.0) == 4
    assert default_beta(3.5) == 6
    # delta = 0 and epsilon = 0 are the experimental modes
    RegularizationParams(0.0, 0.0, 2, 4).validate_for(2.0, 2)
