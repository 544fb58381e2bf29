"""The map Phi (momentum solve, then continuity solve), its fixed point, and
the delta/epsilon regularization ladder.

Per-step mode is the default: the velocity is recomputed from the current
density at every time level, which makes the discrete coupled system
lower-triangular in time, so one forward sweep solves it exactly.  The
global mode is the literal Picard iteration on Phi over whole trajectories
(the fixed-point map of the existence argument); it converges to the same
discrete solution and is kept for cross-validation.  The iteration metric is
the discrete C([0,T]; L^{2 gamma}) norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional

import numpy as np

from .constitutive import ConstitutiveModel, RegularizationParams, pressure
from .continuity import (
    ContinuityStepper,
    DensityState,
    n_steps_for,
    step as continuity_step,
)
from .errors import NoConvergence, SolverError
from .fields import (
    Grid,
    ScalarField,
    VectorField,
    gradient,
    jacobian,
    laplacian_power,
    lp_norm,
    w1inf_norm,
)
from .momentum import MomentumProblem, MomentumSolution, solve_momentum, dissipation


@dataclass
class FixedPointOptions:
    mode: str = "per_step"
    tol: float = 1e-8
    max_iter: int = 50
    relaxation: float = 1.0

    def __post_init__(self):
        if self.mode not in ("per_step", "global"):
            raise ValueError(f"fixed_point.mode must be per_step|global, got {self.mode!r}")
        if self.tol <= 0.0:
            raise ValueError("fixed_point.tol must be positive")
        if self.max_iter < 1:
            raise ValueError("fixed_point.max_iter must be >= 1")
        if not 0.0 < self.relaxation <= 1.0:
            raise ValueError("fixed_point.relaxation must lie in (0, 1]")


@dataclass
class CoupledConfig:
    model: ConstitutiveModel
    params: RegularizationParams
    grid: Grid
    dt: float
    T: float
    fixed_point: FixedPointOptions = dc_field(default_factory=FixedPointOptions)
    momentum_tol: float = 1e-9
    momentum_max_iter: int = 500
    cfl: float = 0.5
    scheme: str = "imex"

    def n_steps(self) -> int:
        return n_steps_for(self.T, self.dt)

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps() + 1) * self.dt

    def stepper(self) -> ContinuityStepper:
        return ContinuityStepper(self.params, dt=self.dt, scheme=self.scheme, cfl=self.cfl)

    def replace_regularization(self, delta: float, epsilon: float) -> "CoupledConfig":
        params = RegularizationParams(delta=delta, epsilon=epsilon,
                                      m=self.params.m, beta=self.params.beta)
        return CoupledConfig(
            model=self.model, params=params, grid=self.grid, dt=self.dt, T=self.T,
            fixed_point=self.fixed_point, momentum_tol=self.momentum_tol,
            momentum_max_iter=self.momentum_max_iter, cfl=self.cfl, scheme=self.scheme,
        )


@dataclass
class TrajectoryState:
    """Converged coupled trajectory plus scalar diagnostics series."""

    times: np.ndarray
    rho: List[ScalarField]
    u: List[VectorField]
    series: Dict[str, np.ndarray]
    fixed_point_residuals: np.ndarray
    flags: List[str]
    clamp_events: int

    def __post_init__(self):
        if not np.all(np.diff(self.times) > 0):
            raise ValueError("trajectory times must be strictly increasing")
        if len(self.rho) != len(self.times) or len(self.u) != len(self.times):
            raise ValueError("snapshot counts inconsistent with the time grid")


def pressure_energy(rho: ScalarField, gamma: float) -> float:
    """(1/(gamma-1)) int rho^gamma, or int rho ln rho when gamma = 1."""
    vals = rho.values
    if gamma == 1.0:
        safe = np.where(vals > 0.0, vals, 1.0)
        e = np.mean(np.where(vals > 0.0, vals * np.log(safe), 0.0))
    else:
        e = np.mean(vals ** gamma) / (gamma - 1.0)
    return float(e) * rho.grid.volume


def _momentum_diag_adapter(diag, solve_id):
    if diag is None:
        return None
    return lambda it, e, r: diag(solve_id, it, e, r)


def _solve_level(config: CoupledConfig, rho: ScalarField, warm: Optional[VectorField],
                 diag=None, solve_id: int = 0) -> MomentumSolution:
    datum = pressure(config.model, rho)
    problem = MomentumProblem(config.model, config.params, datum)
    return solve_momentum(
        problem,
        tol=config.momentum_tol,
        max_iter=config.momentum_max_iter,
        initial_guess=warm,
        diag=_momentum_diag_adapter(diag, solve_id),
    )


def phi_map(config: CoupledConfig, rho_tilde: List[ScalarField],
            rho_init: Optional[ScalarField] = None,
            warm_u: Optional[List[VectorField]] = None, momentum_diag=None):
    """One application of Phi: solve momentum at every level of rho_tilde,
    then march the continuity equation with those velocities.

    The march starts from rho_init (default: rho_tilde[0]); the map of the
    existence argument always restarts from the mollified initial datum, so
    iterating callers pass it explicitly.  Returns (rho_out, u_levels,
    solver_stats); errors carry the failing time level.
    """
    nlev = config.n_steps() + 1
    if len(rho_tilde) != nlev:
        raise ValueError(f"rho_tilde must have {nlev} levels, got {len(rho_tilde)}")
    u_levels: List[VectorField] = []
    stats = {"momentum_iterations": []}
    for n in range(nlev):
        warm = warm_u[n] if warm_u is not None else (u_levels[-1] if u_levels else None)
        try:
            sol = _solve_level(config, rho_tilde[n], warm, momentum_diag, n)
        except SolverError as exc:
            raise type(exc)(f"momentum solve failed at time level {n}: {exc}") from exc
        u_levels.append(sol.u)
        stats["momentum_iterations"].append(sol.iterations)

    stepper = config.stepper()
    start = rho_init if rho_init is not None else rho_tilde[0]
    state = DensityState(rho=start.copy(), t=0.0)
    rho_out = [state.rho]
    for n in range(nlev - 1):
        try:
            state = continuity_step(state, u_levels[n], stepper)
        except SolverError as exc:
            raise type(exc)(f"continuity step failed at time level {n}: {exc}") from exc
        rho_out.append(state.rho)
    stats["clamp_events"] = stepper.clamp_events
    return rho_out, u_levels, stats


def trajectory_distance(rho_a: List[ScalarField], rho_b: List[ScalarField],
                        p: float) -> float:
    """Discrete C([0,T]; L^p) distance between two density trajectories."""
    return max(
        lp_norm(ScalarField(a.grid, a.values - b.values), p)
        for a, b in zip(rho_a, rho_b)
    )


def spacetime_l2_distance(times: np.ndarray, fields_a, fields_b,
                          grad: bool = False) -> float:
    """L^2((0,T) x torus) distance, trapezoidal in time.

    With grad=True the fields are velocities and the distance is taken
    between their Jacobians.
    """
    sq = []
    for a, b in zip(fields_a, fields_b):
        if grad:
            diff = jacobian(VectorField(a.grid, a.values - b.values))
        else:
            diff = ScalarField(a.grid, a.values - b.values)
        sq.append(lp_norm(diff, 2) ** 2)
    return float(np.sqrt(np.trapezoid(np.asarray(sq), times)))


def _build_series(config: CoupledConfig, times, rho, u) -> Dict[str, np.ndarray]:
    gamma = config.model.gamma
    return {
        "t": times,
        "mass": np.array([float(np.mean(r.values)) * r.grid.volume for r in rho]),
        "energy": np.array([pressure_energy(r, gamma) for r in rho]),
        "rho_l2gamma": np.array([lp_norm(r, 2.0 * gamma) for r in rho]),
        "dissipation": np.array(
            [dissipation(config.model, config.params, v) for v in u]
        ),
        "u_max": np.array([lp_norm(v, np.inf) for v in u]),
        "u_w1inf": np.array([w1inf_norm(v) for v in u]),
    }


def solve_fixed_point(config: CoupledConfig, rho0: ScalarField,
                      momentum_diag=None) -> TrajectoryState:
    """Solve the coupled discrete system on [0, T].

    per_step mode: one forward sweep (velocity from the current density at
    each level) -- exact for the discrete system.  global mode: Picard
    iteration rho^{k+1} = (1-theta) rho^k + theta Phi(rho^k) until the
    C([0,T]; L^{2 gamma}) increment drops below tol; theta falls back to 1/2
    when the residual increases, and a run whose residuals keep increasing
    at theta <= 1/2 is flagged, never silently accepted.
    """
    if np.min(rho0.values) <= 0.0:
        raise ValueError("solve_fixed_point needs rho0 > 0 pointwise")
    opts = config.fixed_point
    times = config.times()
    nlev = times.size

    if opts.mode == "per_step":
        stepper = config.stepper()
        state = DensityState(rho=rho0.copy(), t=0.0)
        rho_levels = [state.rho]
        u_levels: List[VectorField] = []
        for n in range(nlev - 1):
            sol = _solve_level(config, state.rho, u_levels[-1] if u_levels else None,
                               momentum_diag, n)
            u_levels.append(sol.u)
            state = continuity_step(state, sol.u, stepper)
            rho_levels.append(state.rho)
        sol = _solve_level(config, state.rho, u_levels[-1], momentum_diag, nlev - 1)
        u_levels.append(sol.u)
        return TrajectoryState(
            times=times,
            rho=rho_levels,
            u=u_levels,
            series=_build_series(config, times, rho_levels, u_levels),
            fixed_point_residuals=np.array([]),
            flags=[],
            clamp_events=stepper.clamp_events,
        )

    # global Picard iteration on whole trajectories
    p_metric = 2.0 * config.model.gamma
    theta = opts.relaxation
    current = [rho0.copy() for _ in range(nlev)]
    warm_u: Optional[List[VectorField]] = None
    residuals: List[float] = []
    flags: List[str] = []
    clamp_events = 0
    u_levels: List[VectorField] = []
    for _ in range(opts.max_iter):
        rho_new, u_levels, stats = phi_map(config, current, rho_init=rho0,
                                           warm_u=warm_u, momentum_diag=momentum_diag)
        clamp_events = stats["clamp_events"]
        warm_u = u_levels
        relaxed = [
            ScalarField(config.grid, (1.0 - theta) * c.values + theta * n.values)
            for c, n in zip(current, rho_new)
        ]
        res = trajectory_distance(relaxed, current, p_metric)
        residuals.append(res)
        current = relaxed
        if res < opts.tol:
            break
        if len(residuals) >= 2 and res > residuals[-2]:
            if theta > 0.5:
                theta = 0.5
            else:
                flags.append("fixed_point_residual_increase")
    else:
        raise NoConvergence(
            f"global fixed point: residual {residuals[-1]:.3e} > tol {opts.tol:.3e} "
            f"after {opts.max_iter} iterations",
            best=(current, residuals),
        )

    return TrajectoryState(
        times=times,
        rho=current,
        u=u_levels,
        series=_build_series(config, times, current, u_levels),
        fixed_point_residuals=np.array(residuals),
        flags=flags,
        clamp_events=clamp_events,
    )


def coupled_residuals(config: CoupledConfig, traj: TrajectoryState) -> dict:
    """Substitute (rho, u) back into both discrete equations.

    Momentum: L^2 norm of the energy gradient at each level's velocity.
    Continuity: L^2 gap between the stored rho_{n+1} and a recomputed step.
    """
    from .momentum import energy_gradient

    mom = []
    for r, v in zip(traj.rho, traj.u):
        problem = MomentumProblem(config.model, config.params,
                                  pressure(config.model, r))
        mom.append(lp_norm(energy_gradient(problem, v), 2))
    cont = []
    stepper = config.stepper()
    for n in range(len(traj.times) - 1):
        redo = continuity_step(DensityState(traj.rho[n].copy(), traj.times[n]),
                               traj.u[n], stepper)
        cont.append(lp_norm(ScalarField(config.grid,
                                        redo.rho.values - traj.rho[n + 1].values), 2))
    return {"momentum_l2": np.array(mom), "continuity_l2": np.array(cont)}


def phi_lipschitz_probe(config: CoupledConfig, rho_tilde1: List[ScalarField],
                        rho_tilde2: List[ScalarField]) -> dict:
    """Measured ratio ||Phi(r1) - Phi(r2)|| / ||r1 - r2|| in C([0,T]; L^{2 gamma})."""
    p = 2.0 * config.model.gamma
    out1, _, _ = phi_map(config, rho_tilde1, rho_init=rho_tilde1[0])
    out2, _, _ = phi_map(config, rho_tilde2, rho_init=rho_tilde1[0])
    denom = trajectory_distance(rho_tilde1, rho_tilde2, p)
    numer = trajectory_distance(out1, out2, p)
    return {"input_distance": denom, "output_distance": numer,
            "lipschitz_ratio": numer / denom if denom > 0 else 0.0}


def homotopy_probe(config: CoupledConfig, rho0: ScalarField, s_values,
                   max_iter: int = 60, tol: float = 1e-8) -> dict:
    """Iterate rho = s * Phi(rho) for each s and report the converged norms.

    Phi always restarts its continuity march from rho0, so the s-fixed
    points start at s*rho0; their uniform boundedness echoes the a priori
    bound on the fixed-point family.
    """
    nlev = config.n_steps() + 1
    p = 2.0 * config.model.gamma
    report = {}
    for s in s_values:
        if s == 0.0:
            report[s] = {"iterations": 0, "sup_l2gamma": 0.0, "residual": 0.0}
            continue
        current = [ScalarField(config.grid, s * rho0.values) for _ in range(nlev)]
        res = np.inf
        warm = None
        it = 0
        for it in range(1, max_iter + 1):
            out, u_levels, _ = phi_map(config, current, rho_init=rho0, warm_u=warm)
            warm = u_levels
            scaled = [ScalarField(config.grid, s * f.values) for f in out]
            res = trajectory_distance(scaled, current, p)
            current = scaled
            if res < tol:
                break
        report[s] = {
            "iterations": it,
            "sup_l2gamma": max(lp_norm(f, p) for f in current),
            "residual": res,
        }
    return report


@dataclass
class LadderRung:
    delta: float
    epsilon: float
    trajectory: Optional[TrajectoryState]
    error: Optional[str]
    sqrt_eps_delta_m_u: float
    sqrt_delta_grad_rho: float


@dataclass
class LadderReport:
    rungs: List[LadderRung]
    rho_distances: List[float]
    grad_u_distances: List[float]

    def rows(self):
        out = []
        for i, r in enumerate(self.rungs):
            out.append({
                "delta": r.delta,
                "epsilon": r.epsilon,
                "status": "ok" if r.error is None else "failed",
                "sqrt_eps_delta_m_u": r.sqrt_eps_delta_m_u,
                "sqrt_delta_grad_rho": r.sqrt_delta_grad_rho,
                "rho_dist_to_next": self.rho_distances[i] if i < len(self.rho_distances) else float("nan"),
                "grad_u_dist_to_next": self.grad_u_distances[i] if i < len(self.grad_u_distances) else float("nan"),
                "error": r.error or "",
            })
        return out


def _rung_certificates(config: CoupledConfig, traj: TrajectoryState):
    """sup_t sqrt(eps)||Delta^m u||_L2 and sqrt(delta)||grad rho||_{L2((0,T) x torus)}."""
    m = config.params.m
    sup_dm = max(lp_norm(laplacian_power(v, m), 2) for v in traj.u)
    grad_sq = np.array([lp_norm(gradient(r), 2) ** 2 for r in traj.rho])
    grad_rho = float(np.sqrt(np.trapezoid(grad_sq, traj.times)))
    return np.sqrt(config.params.epsilon) * sup_dm, np.sqrt(config.params.delta) * grad_rho


def _solve_rung(base_config: CoupledConfig, rho0: ScalarField,
                d: float, e: float) -> LadderRung:
    cfg = base_config.replace_regularization(d, e)
    try:
        traj = solve_fixed_point(cfg, rho0)
        c_eps, c_delta = _rung_certificates(cfg, traj)
        return LadderRung(d, e, traj, None, c_eps, c_delta)
    except (SolverError, ValueError) as exc:
        return LadderRung(d, e, None, str(exc), float("nan"), float("nan"))


def regularization_ladder(base_config: CoupledConfig, rho0: ScalarField,
                          deltas, epsilons, max_workers: int = 1) -> LadderReport:
    """Run solve_fixed_point per (delta, epsilon) rung; report pairwise
    trajectory distances and the uniform-in-rung certificates.

    Rung failures are recorded and the ladder continues.  Rungs are
    independent; max_workers > 1 runs them in a thread pool (results stay
    ordered, so the report is deterministic).
    """
    deltas = list(deltas)
    epsilons = list(epsilons)
    if len(deltas) != len(epsilons):
        raise ValueError("deltas and epsilons must have equal length")
    if any(d0 <= d1 for d0, d1 in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be strictly descending")

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rungs = list(pool.map(
                lambda de: _solve_rung(base_config, rho0, *de),
                zip(deltas, epsilons),
            ))
    else:
        rungs = [_solve_rung(base_config, rho0, d, e)
                 for d, e in zip(deltas, epsilons)]

    rho_d, gradu_d = [], []
    for a, b in zip(rungs, rungs[1:]):
        if a.trajectory is None or b.trajectory is None:
            rho_d.append(float("nan"))
            gradu_d.append(float("nan"))
            continue
        ta, tb = a.trajectory, b.trajectory
        rho_d.append(spacetime_l2_distance(ta.times, ta.rho, tb.rho))
        gradu_d.append(spacetime_l2_distance(ta.times, ta.u, tb.u, grad=True))
    return LadderReport(rungs=rungs, rho_distances=rho_d, grad_u_distances=gradu_d)


def ladder_defect_series(report: LadderReport, i: int, j: int,
                         gamma: float) -> np.ndarray:
    """|int(rho_i^gamma - rho_j^gamma) dx| per time level, for gronwall_compare."""
    ta = report.rungs[i].trajectory
    tb = report.rungs[j].trajectory
    if ta is None or tb is None:
        raise ValueError("both rungs must have succeeded")
    out = []
    for ra, rb in zip(ta.rho, tb.rho):
        va = ra.values ** gamma if gamma != 1.0 else ra.values
        vb = rb.values ** gamma if gamma != 1.0 else rb.values
        out.append(abs(float(np.mean(va - vb)) * ra.grid.volume))
    out[0] = 0.0  # identical initial data by construction
    return np.asarray(out)
