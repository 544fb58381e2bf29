"""Quasi-static momentum balance: minimize the convex velocity functional.

For a density datum p = rho_tilde^gamma the discrete energy is

    I[v] = int F(P D v) + |grad v|^2/2 + (div v)^2/2 + Lambda0(P div v)
               + eps/2 |Delta^m v|^2 - p div v - f . v dx

over mean-zero velocity fields, where P is the 2/3 dealias projector, F the
shear potential and Lambda0 the non-Newtonian part of the bulk potential.
energy_gradient() is the exact discrete gradient of energy(), so its zero is
the Euler-Lagrange (momentum) equation with the nonlinear fluxes dealiased:

    -div(P mu0(|P D v|) P D v) - Lap v - grad(div v + P lam(|P div v|) P div v)
        + eps Delta^{2m} v + grad p - f = 0.

Inside this module -Lap and Delta^m use the derivative wavenumbers (Nyquist
zeroed), which is what makes the energy/gradient pair exactly consistent.
The solver is preconditioned nonlinear CG (Polak-Ribiere+, strong Wolfe line
search); the preconditioner is the inverse of the quadratic part,
1/(|k|^2 + eps |k|^{4m}), applied as a Fourier multiplier.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .constitutive import (
    ConstitutiveModel,
    RegularizationParams,
    potential_F,
    potential_Lambda0,
)
from .errors import MaxIterationsExceeded, NonFiniteError
from .fields import (
    Grid,
    ScalarField,
    TensorField,
    VectorField,
    _dealias_mask,
    _irfft,
    _rfft,
    _wavenumbers,
    component_means,
    jacobian,
    lp_norm,
    w1inf_norm,
)

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 500

_WOLFE_C1 = 1e-4
_WOLFE_C2 = 0.1


@functools.lru_cache(maxsize=None)
def _deriv_k_squared(dim: int, n: int) -> np.ndarray:
    kd, _ = _wavenumbers(dim, n)
    ksq = sum(k * k for k in kd)
    ksq.flags.writeable = False
    return ksq


@functools.lru_cache(maxsize=None)
def _preconditioner(dim: int, n: int, epsilon: float, m: int) -> np.ndarray:
    ksq = _deriv_k_squared(dim, n)
    denom = ksq + epsilon * ksq ** (2 * m)
    inv = np.zeros_like(denom)
    np.divide(1.0, denom, out=inv, where=denom > 0)
    inv.flags.writeable = False
    return inv


def _project_solution_space(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Zero the mean and the modes the discrete operator cannot see."""
    ksq = _deriv_k_squared(grid.dim, grid.n)
    spec = _rfft(values, grid)
    spec *= ksq > 0
    return _irfft(spec, grid)


def discrete_shear_flux_from_D(model: ConstitutiveModel, D: TensorField) -> TensorField:
    """P mu0(|P D|) (P D): the dealiased shear flux the solver differentiates."""
    g = D.grid
    mask = _dealias_mask(g.dim, g.n)
    Dm = _irfft(mask * _rfft(D.values, g), g)
    mag = np.sqrt(np.sum(Dm * Dm, axis=(0, 1)))
    S = model.mu0(mag) * Dm
    return TensorField(g, _irfft(mask * _rfft(S, g), g))


def discrete_shear_flux(model: ConstitutiveModel, u: VectorField) -> TensorField:
    J = jacobian(u).values
    D = TensorField(u.grid, 0.5 * (J + np.swapaxes(J, 0, 1)))
    return discrete_shear_flux_from_D(model, D)


def discrete_bulk_flux(model: ConstitutiveModel, s: ScalarField) -> ScalarField:
    """div v + P lam(|P div v|) (P div v): the dealiased bulk flux."""
    g = s.grid
    mask = _dealias_mask(g.dim, g.n)
    sm = _irfft(mask * _rfft(s.values, g), g)
    lam_part = _irfft(mask * _rfft(model.lam(np.abs(sm)) * sm, g), g)
    return ScalarField(g, s.values + lam_part)


@dataclass
class MomentumProblem:
    """One time level of the elliptic solve: model, regularization, datum.

    rho_gamma is the pressure datum rho_tilde^gamma (nonnegative); it is
    dealiased once here, as is the optional manufactured forcing (which is
    also projected to zero mean).  epsilon = 0 runs the formal-limit mode.
    """

    model: ConstitutiveModel
    params: RegularizationParams
    rho_gamma: ScalarField
    forcing: Optional[VectorField] = None

    def __post_init__(self):
        if np.any(self.rho_gamma.values < 0.0):
            raise ValueError("momentum datum rho_gamma must be nonnegative")
        self.params.validate_for(self.model.gamma, self.rho_gamma.grid.dim)
        g = self.rho_gamma.grid
        mask = _dealias_mask(g.dim, g.n)
        self._datum = _irfft(mask * _rfft(self.rho_gamma.values, g), g)
        self._datum_hat = mask * _rfft(self.rho_gamma.values, g)
        if self.forcing is not None:
            if self.forcing.grid != g:
                raise ValueError("forcing must live on the datum grid")
            fv = _project_solution_space(self.forcing.values, g)
            self._forcing = _irfft(mask * _rfft(fv, g), g)
            self._forcing_hat = _rfft(self._forcing, g)
        else:
            self._forcing = None
            self._forcing_hat = None

    @property
    def grid(self) -> Grid:
        return self.rho_gamma.grid


@dataclass
class MomentumCertificate:
    """Norms backing the a priori estimate for one solve."""

    datum_l2: float
    grad_u_l2: float
    sqrt_eps_delta_m_u_l2: float
    u_w1inf: Optional[float]  # None in the eps = 0 formal-limit mode


@dataclass
class MomentumSolution:
    u: VectorField
    residual_norm: float
    energy_value: float
    iterations: int
    certificate: MomentumCertificate


def _check_mean_zero(v: VectorField):
    scale = max(float(np.max(np.abs(v.values))), 1.0)
    if np.any(np.abs(component_means(v)) > 1e-10 * scale):
        raise ValueError("velocity argument must be componentwise mean-zero")


def _energy_and_gradient(problem: MomentumProblem, vvals: np.ndarray):
    """One fused pass: discrete energy and its exact gradient (array-level)."""
    g = problem.grid
    d = g.dim
    model = problem.model
    eps = problem.params.epsilon
    m = problem.params.m
    kd, _ = _wavenumbers(d, g.n)
    ksq = _deriv_k_squared(d, g.n)
    mask = _dealias_mask(d, g.n)

    u_hat = _rfft(vvals, g)
    J_hat = np.stack([
        np.stack([1j * kd[j] * u_hat[i] for j in range(d)])
        for i in range(d)
    ])
    J = _irfft(J_hat, g)
    s_hat = sum(1j * kd[j] * u_hat[j] for j in range(d))
    s = _irfft(s_hat, g)

    D_hat = 0.5 * (J_hat + np.swapaxes(J_hat, 0, 1))
    Dm = _irfft(mask * D_hat, g)
    Dmag = np.sqrt(np.sum(Dm * Dm, axis=(0, 1)))
    S = model.mu0(Dmag) * Dm
    S_hat = mask * _rfft(S, g)

    sm = _irfft(mask * s_hat, g)
    lam_hat = mask * _rfft(model.lam(np.abs(sm)) * sm, g)

    energy = (
        np.mean(potential_F(model, Dmag))
        + 0.5 * np.mean(np.sum(J * J, axis=(0, 1)))
        + 0.5 * np.mean(s * s)
        + np.mean(potential_Lambda0(model, sm))
        - np.mean(problem._datum * s)
    )
    if eps > 0.0:
        dm = _irfft((-ksq) ** m * u_hat, g)
        energy += 0.5 * eps * np.mean(np.sum(dm * dm, axis=0))
    if problem._forcing is not None:
        energy -= np.mean(np.sum(problem._forcing * vvals, axis=0))
    energy *= g.volume

    bulk_hat = s_hat + lam_hat
    grad_hat = np.empty_like(u_hat)
    for i in range(d):
        acc = ksq * u_hat[i]
        acc -= sum(1j * kd[j] * S_hat[i, j] for j in range(d))
        acc -= 1j * kd[i] * bulk_hat
        acc += 1j * kd[i] * problem._datum_hat
        if eps > 0.0:
            acc += eps * ksq ** (2 * m) * u_hat[i]
        if problem._forcing_hat is not None:
            acc -= problem._forcing_hat[i]
        grad_hat[i] = acc
    grad = _irfft(grad_hat, g)

    if not np.isfinite(energy):
        raise NonFiniteError("momentum energy is not finite (datum or model pathology)")
    return float(energy), grad


def energy(problem: MomentumProblem, v: VectorField) -> float:
    """Value of the discrete convex functional at a mean-zero velocity."""
    _check_mean_zero(v)
    e, _ = _energy_and_gradient(problem, v.values)
    return e


def energy_gradient(problem: MomentumProblem, v: VectorField) -> VectorField:
    """Exact gradient of energy(); its zero is the discrete momentum balance."""
    _check_mean_zero(v)
    _, grad = _energy_and_gradient(problem, v.values)
    return VectorField(problem.grid, grad)


def _ip(grid: Grid, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.sum(a * b, axis=0))) * grid.volume


def _quadratic_curvature(problem: MomentumProblem, dvals: np.ndarray) -> float:
    """<A_quad d, d> for the quadratic part -Lap - grad div + eps Delta^{2m}."""
    g = problem.grid
    kd, _ = _wavenumbers(g.dim, g.n)
    ksq = _deriv_k_squared(g.dim, g.n)
    d_hat = _rfft(dvals, g)
    J = _irfft(np.stack([
        np.stack([1j * kd[j] * d_hat[i] for j in range(g.dim)])
        for i in range(g.dim)
    ]), g)
    s = _irfft(sum(1j * kd[j] * d_hat[j] for j in range(g.dim)), g)
    q = np.mean(np.sum(J * J, axis=(0, 1))) + np.mean(s * s)
    eps, m = problem.params.epsilon, problem.params.m
    if eps > 0.0:
        dm = _irfft((-ksq) ** m * d_hat, g)
        q += eps * np.mean(np.sum(dm * dm, axis=0))
    return float(q) * g.volume


def _wolfe_search(evaluate, grid, x, d, e0, g0, alpha0):
    """Strong Wolfe search on the convex 1-d slice via derivative bracketing.

    phi'(alpha) is increasing, so a sign change brackets the minimizer; the
    quadratic-model step alpha0 already satisfies phi'(alpha0) >= 0 in exact
    arithmetic.  Returns (alpha, e, grad, evals).
    """
    dphi0 = _ip(grid, g0, d)
    lo, hi = 0.0, None
    dhi = None
    alpha = alpha0
    best = None
    for evals in range(1, 31):
        e, grad = evaluate(x + alpha * d)
        dphi = _ip(grid, grad, d)
        armijo = e <= e0 + _WOLFE_C1 * alpha * dphi0 + 1e-14 * (1.0 + abs(e0))
        if armijo and (best is None or e < best[1]):
            best = (alpha, e, grad)
        if armijo and abs(dphi) <= _WOLFE_C2 * abs(dphi0):
            return alpha, e, grad, evals
        if dphi < 0.0:
            lo = alpha
            if hi is None:
                alpha *= 2.0
                continue
        else:
            hi, dhi = alpha, dphi
        # safeguarded bisection toward the derivative root
        alpha = 0.5 * (lo + hi)
        if hi - lo <= 1e-16 * max(1.0, hi):
            break
    if best is not None:
        return best[0], best[1], best[2], evals
    raise NonFiniteError("momentum line search failed to find a Wolfe step")


def solve_momentum(
    problem: MomentumProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    initial_guess: Optional[VectorField] = None,
    diag: Optional[Callable[[int, float, float], None]] = None,
) -> MomentumSolution:
    """Minimize the momentum functional to preconditioned residual <= tol.

    The residual norm is sqrt(<g, M^-1 g>) with M the quadratic part.  On
    budget exhaustion MaxIterationsExceeded is raised with `best` set to the
    best solution found.  `diag(iteration, energy, residual)` is invoked once
    per iterate when given.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    g = problem.grid
    eps, m = problem.params.epsilon, problem.params.m
    minv = _preconditioner(g.dim, g.n, eps, m)

    if initial_guess is None:
        x = np.zeros((g.dim,) + g.shape)
    else:
        x = _project_solution_space(initial_guess.values, g)

    evaluate = lambda vals: _energy_and_gradient(problem, vals)
    e, grad = evaluate(x)
    z = _irfft(minv * _rfft(grad, g), g)
    res = np.sqrt(max(_ip(g, grad, z), 0.0))
    if diag is not None:
        diag(0, e, res)

    iterations = 0
    d = -z
    while res > tol:
        if iterations >= max_iter:
            sol = _package(problem, x, res, e, iterations)
            raise MaxIterationsExceeded(
                f"momentum solve: residual {res:.3e} > tol {tol:.3e} "
                f"after {iterations} iterations",
                best=sol,
            )
        iterations += 1
        dphi0 = _ip(g, grad, d)
        if dphi0 >= 0.0:  # stale direction; restart on steepest descent
            d = -z
            dphi0 = _ip(g, grad, d)
        curv = _quadratic_curvature(problem, d)
        alpha0 = -dphi0 / max(curv, 1e-300)
        alpha, e_new, grad_new, _ = _wolfe_search(evaluate, g, x, d, e, grad, alpha0)
        x = x + alpha * d
        z_new = _irfft(minv * _rfft(grad_new, g), g)
        res = np.sqrt(max(_ip(g, grad_new, z_new), 0.0))
        beta = _ip(g, z_new, grad_new - grad) / _ip(g, z, grad)
        beta = max(0.0, beta)
        d = -z_new + beta * d
        e, grad, z = e_new, grad_new, z_new
        if diag is not None:
            diag(iterations, e, res)

    return _package(problem, x, res, e, iterations)


def _package(problem, xvals, res, e, iterations) -> MomentumSolution:
    g = problem.grid
    xvals = xvals - xvals.mean(axis=tuple(range(1, xvals.ndim)), keepdims=True)
    u = VectorField(g, xvals)
    eps, m = problem.params.epsilon, problem.params.m
    ksq = _deriv_k_squared(g.dim, g.n)
    dm = _irfft((-ksq) ** m * _rfft(xvals, g), g)
    sqrt_eps_dm = np.sqrt(eps) * np.sqrt(np.mean(np.sum(dm * dm, axis=0)) * g.volume)
    cert = MomentumCertificate(
        datum_l2=lp_norm(problem.rho_gamma, 2),
        grad_u_l2=lp_norm(jacobian(u), 2),
        sqrt_eps_delta_m_u_l2=float(sqrt_eps_dm),
        u_w1inf=w1inf_norm(u) if eps > 0.0 else None,
    )
    return MomentumSolution(
        u=u,
        residual_norm=float(res),
        energy_value=float(e),
        iterations=int(iterations),
        certificate=cert,
    )


def energy_identity_terms(problem: MomentumProblem, u: VectorField) -> dict:
    """Both sides of the tested-by-u identity, with the solver's discrete fluxes.

    Returns the dissipation terms, the pressure work, and the relative
    residual; at a converged solve the residual is at the solver-tolerance
    level.
    """
    g = problem.grid
    model = problem.model
    eps, m = problem.params.epsilon, problem.params.m
    mask = _dealias_mask(g.dim, g.n)
    ksq = _deriv_k_squared(g.dim, g.n)

    u_hat = _rfft(u.values, g)
    kd, _ = _wavenumbers(g.dim, g.n)
    J_hat = np.stack([
        np.stack([1j * kd[j] * u_hat[i] for j in range(g.dim)])
        for i in range(g.dim)
    ])
    J = _irfft(J_hat, g)
    s = _irfft(sum(1j * kd[j] * u_hat[j] for j in range(g.dim)), g)
    Dm = _irfft(mask * 0.5 * (J_hat + np.swapaxes(J_hat, 0, 1)), g)
    Dmag = np.sqrt(np.sum(Dm * Dm, axis=(0, 1)))
    sm = _irfft(mask * _rfft(s, g), g)

    vol = g.volume
    terms = {
        "shear": vol * float(np.mean(model.mu0(Dmag) * Dmag ** 2)),
        "grad_sq": vol * float(np.mean(np.sum(J * J, axis=(0, 1)))),
        "div_sq": vol * float(np.mean(s * s)),
        "bulk_lambda": vol * float(np.mean(model.lam(np.abs(sm)) * sm * sm)),
    }
    if eps > 0.0:
        dm = _irfft((-ksq) ** m * u_hat, g)
        terms["eps_biharmonic"] = eps * vol * float(np.mean(np.sum(dm * dm, axis=0)))
    else:
        terms["eps_biharmonic"] = 0.0
    rhs = vol * float(np.mean(problem._datum * s))
    if problem._forcing is not None:
        rhs += vol * float(np.mean(np.sum(problem._forcing * u.values, axis=0)))
    lhs = sum(terms.values())
    residual = lhs - rhs
    scale = max(abs(lhs), abs(rhs), 1e-300)
    terms.update(pressure_work=rhs, residual=residual,
                 residual_rel=abs(residual) / scale)
    return terms


def dissipation(model: ConstitutiveModel, params: RegularizationParams,
                u: VectorField) -> float:
    """Total dissipation of the discrete momentum identity at velocity u."""
    prob = MomentumProblem(model, params,
                           ScalarField(u.grid, np.zeros(u.grid.shape)))
    t = energy_identity_terms(prob, u)
    return t["shear"] + t["grad_sq"] + t["div_sq"] + t["bulk_lambda"] + t["eps_biharmonic"]
