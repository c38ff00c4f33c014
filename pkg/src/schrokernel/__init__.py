"""Numerical verification of heat-kernel, Lyapunov and spectral estimates for
divergence-form Schroedinger operators A = div(Q grad) - V with unbounded
coefficients."""

from .coefficients import (CoefficientField, CoefficientOverflow, Custom, ExponentialIsotropic,
                           IdentityFree, PolynomialIsotropic, SmoothedRadialPower, make_field)
from .discretize import DiscreteOperator, Grid, assemble, build_grid
from .lyapunov import InadmissibleParameters, LyapunovSpec, RateFunction
from .reports import MarginReport
from .semigroup import EvolverConfig, KernelSlice, evolve, kernel_column

__version__ = "0.1.0"
