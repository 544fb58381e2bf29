"""csnt: pseudo-spectral simulator and estimate-verification harness for a
regularized compressible non-Newtonian Stokes system on the periodic torus."""

__version__ = "0.1.0"

from .constitutive import (
    ConstitutiveModel,
    RegularizationParams,
    build_model,
    herschel_bulkley_model,
    rational_model,
)
from .continuity import ContinuityStepper, DensityState, solve_continuity, step
from .coupling import (
    CoupledConfig,
    FixedPointOptions,
    TrajectoryState,
    phi_map,
    regularization_ladder,
    solve_fixed_point,
)
from .fields import (
    Grid,
    ScalarField,
    TensorField,
    VectorField,
    dealias,
    divergence,
    divergence_tensor,
    gradient,
    inverse_laplacian_zero_mean,
    laplacian_power,
    lp_norm,
    mean,
    project_zero_mean,
    read_snapshot,
    symmetric_gradient,
    write_snapshot,
)
from .momentum import (
    MomentumProblem,
    MomentumSolution,
    energy,
    energy_gradient,
    solve_momentum,
)
from .diagnostics import (
    DyadicCubeSet,
    TruncationOperator,
    bmo_norm,
    bogovskii_pressure_test,
    cz_flux,
    effective_viscous_flux,
    energy_balance,
    gronwall_compare,
    log_inequality_ratio,
    pk_apply,
    renormalized_identity_residual,
    truncation_apply,
)
