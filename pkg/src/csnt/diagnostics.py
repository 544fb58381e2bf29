"""Numerical checks of the analytical machinery: energy balance, effective
viscous flux and its singular-integral representation, dyadic BMO norms, the
logarithmic integral inequality, smooth truncations T_k with their
renormalization P_k, the Bogovskii pressure test, and the Gronwall ODE
comparison.

All checks are pure readers of trajectory data.  Inequality checks report
empirical constants; regression thresholds live in the fixture file, not
here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.integrate import cumulative_simpson

from .constitutive import ConstitutiveModel, RegularizationParams, pressure
from .coupling import TrajectoryState
from .fields import (
    Grid,
    ScalarField,
    VectorField,
    _dealias_mask,
    _irfft,
    _rfft,
    _wavenumbers,
    divergence,
    gradient,
    inverse_laplacian_zero_mean,
    lp_norm,
)
from .momentum import (
    MomentumProblem,
    _deriv_k_squared,
    discrete_bulk_flux,
    discrete_shear_flux,
    energy_identity_terms,
)


# ---------------------------------------------------------------------------
# dyadic BMO
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DyadicCubeSet:
    """Shifted dyadic cube families on the grid.

    Depth j covers cubes of side 2*pi/2^j; every depth must keep at least 4
    grid points per cube side.  Each of the shift_count lattices offsets all
    cube boundaries by (shift * side / shift_count) along every axis.  The
    resulting supremum is a lower bound for the true BMO seminorm
    ("dyadic-BMO lower bound").
    """

    grid: Grid
    max_depth: int
    shift_count: int = 2

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.grid.n >> self.max_depth < 4:
            raise ValueError(
                f"depth {self.max_depth} leaves < 4 grid points per cube side"
            )
        if self.shift_count < 1:
            raise ValueError("shift_count must be >= 1")


def default_cube_set(grid: Grid, shift_count: int = 2) -> DyadicCubeSet:
    return DyadicCubeSet(grid, int(np.log2(grid.n)) - 2, shift_count)


def _mean_oscillation_max(vals: np.ndarray, m: int) -> float:
    """Max over the dyadic blocks of side m of the mean |f - {f}_Q|."""
    d = vals.ndim
    nb = vals.shape[0] // m
    shape = []
    for _ in range(d):
        shape.extend((nb, m))
    a = vals.reshape(shape)
    block_axes = tuple(2 * i + 1 for i in range(d))
    mu = a.mean(axis=block_axes, keepdims=True)
    return float(np.abs(a - mu).mean(axis=block_axes).max())


def bmo_norm(f: ScalarField, cubes: Optional[DyadicCubeSet] = None) -> float:
    """Dyadic-BMO lower bound: sup over all cubes of the mean oscillation."""
    if cubes is None:
        cubes = default_cube_set(f.grid)
    if cubes.grid != f.grid:
        raise ValueError("cube set and field live on different grids")
    n = f.grid.n
    best = 0.0
    for depth in range(cubes.max_depth + 1):
        m = n >> depth
        seen = set()
        for shift in range(cubes.shift_count):
            off = (m * shift) // cubes.shift_count
            if off in seen:
                continue
            seen.add(off)
            rolled = np.roll(f.values, -off, axis=tuple(range(f.grid.dim)))
            best = max(best, _mean_oscillation_max(rolled, m))
    return best


def log_inequality_ratio(f: ScalarField, g: ScalarField, q: float,
                         cubes: Optional[DyadicCubeSet] = None) -> float:
    """|int f g| divided by the logarithmic-BMO bracket with constant 1.

    Bracket: ||f||_BMO ||g||_L1 ( |ln||g||_L1| + ln(e + ||g||_Lq)
    + (1 + |ln||g||_L1|) ||g||_Lq^{(q-2)/2} ).  Defined as 0 when g vanishes.
    """
    if q <= 2.0:
        raise ValueError("the inequality needs q > 2")
    g1 = lp_norm(g, 1)
    if g1 == 0.0:
        return 0.0
    vol = f.grid.volume
    pairing = abs(float(np.mean(f.values * g.values)) * vol)
    gq = lp_norm(g, q)
    bracket = (
        abs(np.log(g1))
        + np.log(np.e + gq)
        + (1.0 + abs(np.log(g1))) * gq ** ((q - 2.0) / 2.0)
    )
    denom = bmo_norm(f, cubes) * g1 * bracket
    if denom == 0.0:
        return 0.0 if pairing == 0.0 else np.inf
    return pairing / denom


# ---------------------------------------------------------------------------
# truncation operators T_k and the renormalization P_k
# ---------------------------------------------------------------------------

class TruncationOperator:
    """Smooth monotone truncation: T_k(z) = z below k, k+1 on the plateau.

    The blend is the C^1 quintic with T'(k) = 1, T' = 0 at the plateau and
    0 <= T' <= 1 throughout, so T_k(z) <= min(z, k+1) and the family is
    monotone in k.  The blend width is clip(k, 2, 8): for 2 <= k <= 8 this is
    the interval [k, 2k]; outside that range the monotone quintic does not
    exist on [k, 2k] and the nearest admissible width is used.
    """

    def __init__(self, k: float):
        if k <= 0.0:
            raise ValueError("truncation level k must be positive")
        self.k = float(k)
        self.width = float(np.clip(k, 2.0, 8.0))
        h = 1.0 / self.width
        if h >= 1.0 / 3.0:
            b, c = 12.0 * (h - 1.0 / 3.0), 0.0
        else:
            t = (5.0 + np.sqrt(120.0 * h - 15.0)) / (20.0 - 60.0 * h)
            b, c = -2.0 / t, 1.0 / t ** 2
        self._b, self._c = b, c
        self._pk_tables: Dict[float, tuple] = {}

    def _blend_value(self, s):
        b, c = self._b, self._c
        return (s + (b - 2.0) * s ** 2 / 2.0 + (c - 2.0 * b + 1.0) * s ** 3 / 3.0
                + (b - 2.0 * c) * s ** 4 / 4.0 + c * s ** 5 / 5.0)

    def _blend_slope(self, s):
        b, c = self._b, self._c
        # the quadratic factor is a perfect square in the touching regime;
        # clamp the roundoff negatives
        return np.maximum((1.0 - s) ** 2 * (1.0 + b * s + c * s ** 2), 0.0)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        s = np.clip((z - self.k) / self.width, 0.0, 1.0)
        blend = self.k + self.width * self._blend_value(s)
        return np.where(z <= self.k, z,
                        np.where(z >= self.k + self.width, self.k + 1.0, blend))

    def prime(self, z):
        z = np.asarray(z, dtype=float)
        s = np.clip((z - self.k) / self.width, 0.0, 1.0)
        return np.where(z <= self.k, 1.0,
                        np.where(z >= self.k + self.width, 0.0, self._blend_slope(s)))

    def _pk_table(self, p: float):
        """Cumulative int_k^x T(z)^p / z^2 dz on the blend: Simpson values on a
        fine grid, interpolated by a Hermite spline whose node slopes are the
        exact integrand (keeps d/drho consistent with pk_prime)."""
        tab = self._pk_tables.get(p)
        if tab is None:
            from scipy.interpolate import CubicHermiteSpline

            zs = np.linspace(self.k, self.k + self.width, 4097)
            integrand = self(zs) ** p / zs ** 2
            cum = np.concatenate(([0.0], cumulative_simpson(integrand, x=zs)))
            tab = CubicHermiteSpline(zs, cum, integrand)
            self._pk_tables[p] = tab
        return tab

    def pk_integral(self, p: float, rho):
        """G(rho) = int_0^rho T(z)^p / z^2 dz (so P_k(rho) = rho * G(rho))."""
        if p <= 1.0:
            raise ValueError("P_k needs p > 1")
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < 0.0):
            raise ValueError("P_k is defined for nonnegative densities")
        k, w = self.k, self.width
        out = np.minimum(rho, k) ** (p - 1.0) / (p - 1.0)
        in_blend = rho > k
        if np.any(in_blend):
            spline = self._pk_table(p)
            out = out + np.where(
                in_blend, spline(np.clip(rho, k, k + w)), 0.0
            )
        past = rho > k + w
        if np.any(past):
            plateau = (k + 1.0) ** p
            out = out + np.where(past, plateau * (1.0 / (k + w) - 1.0 / np.maximum(rho, k + w)), 0.0)
        return out

    def pk(self, p: float, rho):
        return np.asarray(rho, dtype=float) * self.pk_integral(p, rho)

    def pk_prime(self, p: float, rho):
        """d/drho [rho G(rho)] = G(rho) + T(rho)^p / rho."""
        rho = np.asarray(rho, dtype=float)
        ratio = np.zeros_like(rho)
        np.divide(self(rho) ** p, rho, out=ratio, where=rho > 0)
        return self.pk_integral(p, rho) + ratio


def truncation_apply(op: TruncationOperator, rho: ScalarField) -> ScalarField:
    return ScalarField(rho.grid, op(rho.values))


def pk_apply(op: TruncationOperator, p: float, rho: ScalarField) -> ScalarField:
    return ScalarField(rho.grid, op.pk(p, rho.values))


# ---------------------------------------------------------------------------
# effective viscous flux and its multiplier representation
# ---------------------------------------------------------------------------

def effective_viscous_flux(u: VectorField, rho: ScalarField,
                           model: ConstitutiveModel) -> ScalarField:
    """G = (2 + lambda(div u)) div u - rho^gamma, with the solver's discrete
    (dealiased) bulk flux so the multiplier identity is exact."""
    s = divergence(u)
    bulk = discrete_bulk_flux(model, s)
    return ScalarField(u.grid, s.values + bulk.values - pressure(model, rho).values)


def cz_flux(u: VectorField, model: ConstitutiveModel,
            params: Optional[RegularizationParams] = None) -> ScalarField:
    """Effective viscous flux recovered from the stress alone.

    Applies the multiplier -xi_i xi_j / |xi|^2 (zero on the mean mode) to the
    discrete shear flux mu0(|D u|) D u -- the spectral form of convolution
    with the periodized kernel Hessian.  When params with eps > 0 are given,
    the exact correction -eps Delta^{2m-1} div u of the regularized balance
    is included.  Returns the zero-mean representative.
    """
    g = u.grid
    kd, _ = _wavenumbers(g.dim, g.n)
    ksq = _deriv_k_squared(g.dim, g.n)
    inv = np.zeros_like(ksq)
    np.divide(1.0, ksq, out=inv, where=ksq > 0)

    S = discrete_shear_flux(model, u)
    S_hat = _rfft(S.values, g)
    acc = None
    for i in range(g.dim):
        for j in range(g.dim):
            term = -kd[i] * kd[j] * inv * S_hat[i, j]
            acc = term if acc is None else acc + term
    if params is not None and params.epsilon > 0.0:
        u_hat = _rfft(u.values, g)
        s_hat = sum(1j * kd[j] * u_hat[j] for j in range(g.dim))
        acc = acc - params.epsilon * ksq ** (2 * params.m - 1) * s_hat
    acc[(0,) * g.dim] = 0.0
    return ScalarField(g, _irfft(acc, g))


def flux_bmo_certificate(traj: TrajectoryState, model: ConstitutiveModel,
                         cubes: Optional[DyadicCubeSet] = None) -> dict:
    """sup_t of the dyadic-BMO norm of the zero-mean effective viscous flux,
    with the uniform stress bound ||mu0(|Du|)Du||_inf <= C it rests on."""
    bmo_series, stress_series = [], []
    for r, v in zip(traj.rho, traj.u):
        flux = effective_viscous_flux(v, r, model)
        zm = ScalarField(flux.grid, flux.values - np.mean(flux.values))
        bmo_series.append(bmo_norm(zm, cubes))
        stress_series.append(lp_norm(discrete_shear_flux(model, v), np.inf))
    bmo_series = np.asarray(bmo_series)
    stress_series = np.asarray(stress_series)
    sup_stress = float(stress_series.max())
    return {
        "bmo": bmo_series,
        "stress_inf": stress_series,
        "bmo_sup": float(bmo_series.max()),
        "stress_inf_sup": sup_stress,
        "stress_bound_ok": sup_stress <= model.bound_constant * (1.0 + 1e-12),
        "cz_ratio": float(bmo_series.max() / max(sup_stress, 1e-300)),
    }


# ---------------------------------------------------------------------------
# energy balance and the renormalized (P_k) identity along trajectories
# ---------------------------------------------------------------------------

def _delta_terms(rho: ScalarField, model: ConstitutiveModel,
                 params: RegularizationParams) -> float:
    """delta-contributions to dE/dt for the approximate system."""
    if params.delta == 0.0:
        return 0.0
    vals = rho.values
    gamma = model.gamma
    grads = gradient(rho)
    grad_sq = np.sum(grads.values ** 2, axis=0)
    vol = rho.grid.volume
    if gamma == 1.0:
        safe = np.where(vals > 0.0, vals, 1.0)
        penalty = np.mean((np.log(safe) + 1.0) * vals ** params.beta)
        diffusion = np.mean(np.where(vals > 0.0, grad_sq / safe, 0.0))
        return params.delta * vol * float(penalty + diffusion)
    penalty = gamma / (gamma - 1.0) * np.mean(vals ** (params.beta + gamma - 1.0))
    if gamma == 2.0:
        weight = np.ones_like(vals)
    else:
        safe = np.where(vals > 0.0, vals, 1.0)
        weight = np.where(vals > 0.0, safe ** (gamma - 2.0), 0.0)
    diffusion = gamma * np.mean(weight * grad_sq)
    return params.delta * vol * float(penalty + diffusion)


def _pressure_work(rho: ScalarField, s_vals: np.ndarray,
                   model: ConstitutiveModel) -> float:
    """int rho^gamma div u (int rho div u at gamma = 1)."""
    vol = rho.grid.volume
    return vol * float(np.mean(pressure(model, rho).values * s_vals))


def energy_balance(traj: TrajectoryState, model: ConstitutiveModel,
                   params: RegularizationParams) -> dict:
    """Per-step residual of dE/dt + dissipation + delta-terms = 0.

    E is the pressure energy (the rho ln rho variant at gamma = 1).  The
    rate is quadratured with the step's frozen velocity -- the velocity the
    discrete evolution actually used -- via the pressure work
    int rho^gamma div u_n, which at a converged solve equals the
    tested-by-u dissipation of u_n to solver tolerance.  Residuals are
    reported relative to the largest dissipation magnitude encountered.
    """
    from .coupling import pressure_energy

    gamma = model.gamma
    E = np.array([pressure_energy(r, gamma) for r in traj.rho])
    diss = np.empty(len(traj.rho))
    for i, (r, v) in enumerate(zip(traj.rho, traj.u)):
        prob = MomentumProblem(model, params, pressure(model, r))
        terms = energy_identity_terms(prob, v)
        diss[i] = (terms["shear"] + terms["grad_sq"] + terms["div_sq"]
                   + terms["bulk_lambda"] + terms["eps_biharmonic"])
    delta_terms = np.array([_delta_terms(r, model, params) for r in traj.rho])

    dt = np.diff(traj.times)
    residual = np.empty(dt.size)
    for n in range(dt.size):
        s_vals = divergence(traj.u[n]).values
        work = 0.5 * (_pressure_work(traj.rho[n], s_vals, model)
                      + _pressure_work(traj.rho[n + 1], s_vals, model))
        residual[n] = ((E[n + 1] - E[n]) / dt[n] + work
                       + 0.5 * (delta_terms[n] + delta_terms[n + 1]))
    scale = max(float(np.max(np.abs(diss + delta_terms))), 1e-300)
    return {
        "t": traj.times[1:],
        "residual": residual,
        "residual_rel": np.abs(residual) / scale,
        "energy": E,
        "dissipation": diss,
        "dissipation_scale": scale,
    }


def renormalized_identity_residual(traj: TrajectoryState, op: TruncationOperator,
                                   p: float, model: ConstitutiveModel,
                                   params: RegularizationParams) -> dict:
    """Discrete residual of the renormalized truncation identity

        d/dt int P_k(rho) + delta int (rho^beta P_k'(rho)
            + p T_k^{p-1} T_k'(rho)/rho |grad rho|^2) = -int T_k(rho)^p div u,

    trapezoidal in time, normalized by the largest term magnitude.
    """
    vol = traj.rho[0].grid.volume
    P = np.empty(len(traj.rho))
    rhs = np.empty(len(traj.rho))
    for i, (r, v) in enumerate(zip(traj.rho, traj.u)):
        vals = r.values
        P[i] = float(np.mean(op.pk(p, vals))) * vol
        term = float(np.mean(op(vals) ** p * divergence(v).values)) * vol
        if params.delta > 0.0:
            grads = gradient(r)
            grad_sq = np.sum(grads.values ** 2, axis=0)
            tk = op(vals)
            tkp = op.prime(vals)
            ratio = np.zeros_like(vals)
            np.divide(tk ** (p - 1.0) * tkp, vals, out=ratio, where=vals > 0)
            extra = float(np.mean(vals ** params.beta * op.pk_prime(p, vals)
                                  + p * ratio * grad_sq)) * vol
            term += params.delta * extra
        rhs[i] = term
    dt = np.diff(traj.times)
    residual = np.diff(P) / dt + 0.5 * (rhs[:-1] + rhs[1:])
    scale = max(float(np.max(np.abs(rhs))), float(np.max(np.abs(P))) / max(traj.times[-1], 1e-300), 1e-300)
    return {
        "t": traj.times[1:],
        "residual": residual,
        "residual_rel": np.abs(residual) / scale,
        "scale": scale,
    }


# ---------------------------------------------------------------------------
# Bogovskii pressure test
# ---------------------------------------------------------------------------

def bogovskii_field(h: ScalarField) -> VectorField:
    """psi = grad(Delta^-1 (h - {h})): mean-zero with div psi = h - {h}."""
    return gradient(inverse_laplacian_zero_mean(h))


def bogovskii_pressure_test(traj: TrajectoryState, model: ConstitutiveModel,
                            params: RegularizationParams, theta: float = 2.0) -> dict:
    """Pressure-integrability probe with the test function built from rho^theta.

    Verifies div psi = rho^theta - {rho^theta} to spectral accuracy, then
    evaluates every pairing of the discrete momentum balance against psi and
    reports the empirical constant relating the time integral of
    int rho^{gamma+theta} to the sum of the other terms.
    """
    if theta <= 1.0:
        raise ValueError("theta must exceed 1")
    g = traj.rho[0].grid
    kd, _ = _wavenumbers(g.dim, g.n)
    ksq = _deriv_k_squared(g.dim, g.n)
    mask = _dealias_mask(g.dim, g.n)
    vol = g.volume
    eps, m = params.epsilon, params.m

    names = ("shear_work", "newtonian_work", "bulk_work", "eps_work",
             "pressure_mean_term", "pressure_lhs")
    series = {k: [] for k in names}
    divpsi_residual = []
    identity_residual = []
    for r, v in zip(traj.rho, traj.u):
        h_vals = r.values ** theta
        h = ScalarField(g, h_vals)
        psi = bogovskii_field(h)
        div_psi = divergence(psi)
        target = h_vals - np.mean(h_vals)
        divpsi_residual.append(float(np.max(np.abs(div_psi.values - target))))

        psi_hat = _rfft(psi.values, g)
        Jpsi = _irfft(np.stack([
            np.stack([1j * kd[j] * psi_hat[i] for j in range(g.dim)])
            for i in range(g.dim)
        ]), g)
        u_hat = _rfft(v.values, g)
        Ju = _irfft(np.stack([
            np.stack([1j * kd[j] * u_hat[i] for j in range(g.dim)])
            for i in range(g.dim)
        ]), g)

        S = discrete_shear_flux(model, v)
        s = divergence(v)
        bulk = discrete_bulk_flux(model, s)
        p_field = _irfft(mask * _rfft(pressure(model, r).values, g), g)

        shear_w = vol * float(np.mean(np.sum(S.values * Jpsi, axis=(0, 1))))
        newton_w = vol * float(np.mean(np.sum(Ju * Jpsi, axis=(0, 1))))
        bulk_w = vol * float(np.mean(bulk.values * div_psi.values))
        if eps > 0.0:
            dmu = _irfft((-ksq) ** m * u_hat, g)
            dmpsi = _irfft((-ksq) ** m * psi_hat, g)
            eps_w = eps * vol * float(np.mean(np.sum(dmu * dmpsi, axis=0)))
        else:
            eps_w = 0.0
        lhs = vol * float(np.mean(p_field * div_psi.values))
        mean_term = float(np.mean(h_vals)) * vol * float(np.mean(p_field))

        series["shear_work"].append(shear_w)
        series["newtonian_work"].append(newton_w)
        series["bulk_work"].append(bulk_w)
        series["eps_work"].append(eps_w)
        series["pressure_mean_term"].append(mean_term)
        series["pressure_lhs"].append(lhs + mean_term)  # ~ int p rho^theta
        identity_residual.append(shear_w + newton_w + bulk_w + eps_w - lhs)

    series = {k: np.asarray(vs) for k, vs in series.items()}
    series["divpsi_residual"] = np.asarray(divpsi_residual)
    t = traj.times
    integrals = {k: float(np.trapezoid(vs, t)) for k, vs in series.items()
                 if k != "divpsi_residual"}
    pressure_spacetime = float(np.trapezoid(
        [vol * float(np.mean(r.values ** (model.gamma + theta))) for r in traj.rho], t
    ))
    bound_combination = sum(
        abs(integrals[k]) for k in
        ("shear_work", "newtonian_work", "bulk_work", "eps_work", "pressure_mean_term")
    )
    return {
        "theta": theta,
        "divpsi_residual_max": float(np.max(divpsi_residual)),
        "identity_residual_max": float(np.max(np.abs(identity_residual))),
        "series": series,
        "pressure_spacetime_integral": pressure_spacetime,
        "bound_combination": bound_combination,
        "empirical_constant": pressure_spacetime / max(bound_combination, 1e-300),
    }


# ---------------------------------------------------------------------------
# Gronwall comparison for y' <= C y (|ln y| + 1)
# ---------------------------------------------------------------------------

def _comparison_solution(eta: float, C: float, times: np.ndarray) -> np.ndarray:
    """Exact solution of z' = C z (|ln z| + 1), z(0) = eta >= 0.

    For eta = 0 the unique solution is z = 0.  For 0 < eta < 1:
    1 - ln z = (1 - ln eta) e^{-Ct} until z reaches 1, then
    1 + ln z = e^{C(t - t*)}.
    """
    times = np.asarray(times, dtype=float)
    if eta <= 0.0:
        return np.zeros_like(times)
    if eta >= 1.0:
        w0 = 1.0 + np.log(eta)
        return np.exp(w0 * np.exp(C * times) - 1.0)
    t_star = np.log(1.0 - np.log(eta)) / C
    below = np.exp(1.0 - (1.0 - np.log(eta)) * np.exp(-C * times))
    above = np.exp(np.exp(C * (times - t_star)) - 1.0)
    return np.where(times <= t_star, below, above)


@dataclass
class GronwallVerdict:
    passed: bool
    margins: Dict[float, float]  # eta -> max_t (y - z_eta)
    C: float
    tol: float

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def gronwall_compare(times, y, C: float, eta_ladder=None,
                     tol: float = 0.0) -> GronwallVerdict:
    """Compare a nonnegative series y (y(0) = 0) against the comparison ODE.

    z' = C z (|ln z| + 1) from z(0) = 0 gives z = 0, so the verdict is PASS
    iff y stays below every eta-envelope (within tol) as eta decreases down
    the ladder -- the numerical echo of the uniqueness argument.
    """
    times = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape != times.shape:
        raise ValueError("times and y must have equal length")
    if np.any(y < 0.0):
        raise ValueError("the defect series must be nonnegative")
    if abs(y[0]) > tol:
        raise ValueError("the defect series must start at y(0) = 0 (within tol)")
    if eta_ladder is None:
        eta_ladder = [10.0 ** (-k) for k in range(2, 13)]
    margins = {}
    passed = True
    for eta in eta_ladder:
        z = _comparison_solution(float(eta), C, times)
        margin = float(np.max(y - z))
        margins[float(eta)] = margin
        if margin > tol:
            passed = False
    return GronwallVerdict(passed=passed, margins=margins, C=float(C), tol=tol)
