"""Viscosity laws, their convex potentials, the pressure law, and the
regularization parameters of the approximate system.

The built-in shear/bulk viscosity families both satisfy the bound
0 <= mu0(z), lambda(z) <= C/z and make z -> mu0(z)*z nondecreasing, which is
what the convexity of the potentials and the monotonicity of the stress rest
on.  The Newtonian coefficient mu1 is fixed to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad

from .errors import ConfigError
from .fields import ScalarField, TensorField, magnitude

MU1 = 1.0

QUAD_ABS_TOL = 1e-10


@dataclass(frozen=True)
class ConstitutiveModel:
    """Shear viscosity mu0, bulk viscosity lam, pressure exponent gamma.

    `shear_primitive(r)` is Phi(r) = int_0^r mu0(s) s ds and
    `bulk_primitive(r)` the same for lambda; when a closed form is not
    supplied they fall back to adaptive quadrature (1e-10 abs tol).
    """

    name: str
    mu0: Callable
    lam: Callable
    bound_constant: float
    gamma: float
    shear_primitive: Optional[Callable] = None
    bulk_primitive: Optional[Callable] = None
    mu1: float = field(default=MU1, init=False)

    def __post_init__(self):
        if self.gamma < 1.0:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.bound_constant <= 0.0:
            raise ConfigError("bound constant C must be positive")


def rational_model(gamma: float, tau: float = 1.0, a: float = 1.0) -> ConstitutiveModel:
    """mu0(z) = lambda(z) = tau/(a + z); C = tau; closed-form potentials."""
    if a <= 0.0:
        raise ConfigError("rational model needs a > 0 (singular a = 0 rejected)")
    if tau < 0.0:
        raise ConfigError("rational model needs tau >= 0")

    def mu0(z):
        return tau / (a + z)

    def primitive(r):
        # int_0^r tau*s/(a+s) ds = tau*(r - a*log(1 + r/a))
        return tau * (r - a * np.log1p(r / a))

    return ConstitutiveModel(
        name="rational",
        mu0=mu0,
        lam=mu0,
        bound_constant=tau,
        gamma=gamma,
        shear_primitive=primitive,
        bulk_primitive=primitive,
    )


def herschel_bulkley_model(
    gamma: float, tau: float = 1.0, threshold: float = 0.1
) -> ConstitutiveModel:
    """Truncated Herschel-Bulkley: mu0(z) = tau/max(z, threshold).

    The constant below the threshold matches tau/z continuously at z =
    threshold; the n = 1 constant contribution of the classical law belongs
    to the Newtonian mu1 part (keeping it in mu0 would break the C/z bound).
    """
    if threshold <= 0.0:
        raise ConfigError("herschel_bulkley needs hb_threshold > 0")
    if tau < 0.0:
        raise ConfigError("herschel_bulkley needs tau >= 0")

    def mu0(z):
        return tau / np.maximum(z, threshold)

    def primitive(r):
        r = np.asarray(r, dtype=float)
        below = tau * r * r / (2.0 * threshold)
        above = tau * (threshold / 2.0 + (r - threshold))
        return np.where(r <= threshold, below, above)

    return ConstitutiveModel(
        name="herschel_bulkley",
        mu0=mu0,
        lam=mu0,
        bound_constant=tau,
        gamma=gamma,
        shear_primitive=primitive,
        bulk_primitive=primitive,
    )


_BUILTIN_MODELS = {"rational", "herschel_bulkley"}


def build_model(name: str, gamma: float, tau: float = 1.0, a: float = 1.0,
                hb_threshold: float = 0.1) -> ConstitutiveModel:
    if name == "rational":
        return rational_model(gamma, tau=tau, a=a)
    if name == "herschel_bulkley":
        return herschel_bulkley_model(gamma, tau=tau, threshold=hb_threshold)
    raise ConfigError(f"unknown model {name!r}; choose one of {sorted(_BUILTIN_MODELS)}")


@dataclass(frozen=True)
class RegularizationParams:
    """delta, epsilon, m, beta of the regularized system.

    beta must be an even integer >= max(gamma+1, 4); 2m-1 > d/2 is required
    when epsilon > 0 (checked against the grid in validate_for).  delta = 0
    and epsilon = 0 are admitted as experimental/formal-limit modes.
    """

    delta: float
    epsilon: float
    m: int
    beta: int

    def __post_init__(self):
        if self.delta < 0.0 or self.epsilon < 0.0:
            raise ConfigError("delta and epsilon must be nonnegative")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError(f"m must be a positive integer, got {self.m}")
        if int(self.beta) != self.beta or self.beta % 2 or self.beta < 4:
            raise ConfigError(f"beta must be an even integer >= 4, got {self.beta}")

    def validate_for(self, gamma: float, dim: int):
        if self.beta < max(gamma + 1.0, 4.0):
            raise ConfigError(
                f"beta = {self.beta} violates beta >= max(gamma+1, 4) = "
                f"{max(gamma + 1.0, 4.0)}"
            )
        if self.epsilon > 0.0 and not (2 * self.m - 1 > dim / 2.0):
            raise ConfigError(
                f"m = {self.m} too small for d = {dim}: need 2m-1 > d/2 when eps > 0"
            )


def default_beta(gamma: float) -> int:
    """Smallest even integer >= max(gamma+1, 4)."""
    b = int(np.ceil(max(gamma + 1.0, 4.0)))
    return b if b % 2 == 0 else b + 1


def _reject_negative(z, what: str):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0.0):
        raise ValueError(f"{what} is defined for nonnegative arguments")
    return z


def mu0_eval(model: ConstitutiveModel, z):
    return model.mu0(_reject_negative(z, "mu0"))


def lambda_eval(model: ConstitutiveModel, z):
    return model.lam(_reject_negative(z, "lambda"))


def stress(model: ConstitutiveModel, D: TensorField) -> TensorField:
    """Pointwise mu0(|D|) D, |D| the Frobenius norm; |stress| <= C everywhere."""
    mag = magnitude(D)
    return TensorField(D.grid, model.mu0(mag) * D.values)


def _primitive(fn_primitive, viscosity, r):
    r = np.asarray(r, dtype=float)
    if fn_primitive is not None:
        return fn_primitive(r)
    flat = r.reshape(-1)
    out = np.array(
        [quad(lambda s: viscosity(s) * s, 0.0, ri, epsabs=QUAD_ABS_TOL)[0] for ri in flat]
    )
    return out.reshape(r.shape) if r.shape else float(out[0])

def potential_F(model: ConstitutiveModel, r):
    """Phi(r) = int_0^r mu0(s) s ds; F(B) = Phi(|B|)."""
    return _primitive(model.shear_primitive, model.mu0, _reject_negative(r, "potential_F"))


def potential_Lambda(model: ConstitutiveModel, s):
    """Lambda(s) = s^2/2 + int_0^{|s|} lambda(t) t dt (convex, even)."""
    s = np.asarray(s, dtype=float)
    return 0.5 * s * s + _primitive(model.bulk_primitive, model.lam, np.abs(s))


def potential_Lambda0(model: ConstitutiveModel, s):
    """The non-Newtonian part of Lambda: int_0^{|s|} lambda(t) t dt."""
    s = np.asarray(s, dtype=float)
    return _primitive(model.bulk_primitive, model.lam, np.abs(s))


def pressure(model: ConstitutiveModel, rho: ScalarField) -> ScalarField:
    """Barotropic pressure rho^gamma; negative density is rejected."""
    vals = rho.values
    if np.any(vals < 0.0):
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmin(vals)), vals.shape))
        raise ValueError(
            f"pressure needs rho >= 0: min rho = {vals[idx]:.6e} at grid index {idx}"
        )
    if model.gamma == 1.0:
        return ScalarField(rho.grid, vals.copy())
    return ScalarField(rho.grid, vals ** model.gamma)


def monotonicity_gap(model: ConstitutiveModel, B1, B2):
    """(mu0(|B1|)B1 - mu0(|B2|)B2) : (B1 - B2); >= 0 for monotone models.

    Accepts single d x d matrices or stacks (..., d, d).
    """
    B1 = np.asarray(B1, dtype=float)
    B2 = np.asarray(B2, dtype=float)
    n1 = np.sqrt(np.sum(B1 * B1, axis=(-2, -1)))
    n2 = np.sqrt(np.sum(B2 * B2, axis=(-2, -1)))
    S1 = model.mu0(n1)[..., None, None] * B1
    S2 = model.mu0(n2)[..., None, None] * B2
    gap = np.sum((S1 - S2) * (B1 - B2), axis=(-2, -1))
    return float(gap) if gap.ndim == 0 else gap


def certify_bound(model: ConstitutiveModel, z_min=1e-6, z_max=1e6, count=2001):
    """Max of z*mu0(z) and z*lambda(z) on a log-spaced grid; both must be <= C."""
    z = np.logspace(np.log10(z_min), np.log10(z_max), count)
    worst = max(float(np.max(z * model.mu0(z))), float(np.max(z * model.lam(z))))
    return worst, worst <= model.bound_constant * (1.0 + 1e-12)
