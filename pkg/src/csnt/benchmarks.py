"""Canonical desk-scale benchmark setups shared by tests, fixtures and docs.

The smooth benchmark is rho0 = 1 + 0.3 cos(x1) on the 2-torus with the
rational viscosity model; regularization follows the epsilon = delta/10
pairing used throughout the verification suite.
"""

from __future__ import annotations

import numpy as np

from .constitutive import RegularizationParams, default_beta, rational_model
from .coupling import CoupledConfig, FixedPointOptions
from .fields import Grid, ScalarField

BENCHMARK_DELTAS = (1e-2, 1e-3, 1e-4)


def smooth_initial_density(grid: Grid, amplitude: float = 0.3) -> ScalarField:
    x1 = grid.meshes()[0]
    return ScalarField(grid, 1.0 + amplitude * np.cos(x1))


def smooth_benchmark(
    n: int = 64,
    gamma: float = 2.0,
    delta: float = 1e-3,
    epsilon: float = 1e-4,
    m: int = 2,
    dt: float = 1e-3,
    T: float = 0.25,
    mode: str = "per_step",
    fp_tol: float = 1e-8,
    momentum_tol: float = 1e-9,
):
    """(CoupledConfig, rho0) for the smooth verification benchmark."""
    grid = Grid(2, n)
    model = rational_model(gamma=gamma)
    params = RegularizationParams(delta=delta, epsilon=epsilon, m=m,
                                  beta=default_beta(gamma))
    params.validate_for(gamma, grid.dim)
    config = CoupledConfig(
        model=model,
        params=params,
        grid=grid,
        dt=dt,
        T=T,
        fixed_point=FixedPointOptions(mode=mode, tol=fp_tol),
        momentum_tol=momentum_tol,
    )
    return config, smooth_initial_density(grid)


def ladder_epsilons(deltas) -> list:
    """The epsilon-tied-to-delta pairing of the verification ladder."""
    return [d / 10.0 for d in deltas]
