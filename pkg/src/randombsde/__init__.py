"""Optimal control of path-dependent SDEs by randomized control and BSDEs with nonpositive jumps."""

from . import benchmarks
from .bsde import (BsdeSolution, DualCertificate, MinimalSolution, PenalizationSchedule, RegressionBasis,
                   build_population, constraint_violation, dual_representation_value, growth_bound_check,
                   minimal_solution, solve_penalized)
from .control import (ControlProcess, ControlSpace, FiniteMarkMeasure, InitialPath, PiecewiseConstantControl,
                      PolicyControl, ProblemSpec, SamplePath, TimeGrid, control_distance, sample_mark,
                      validate_problem)
from .errors import *  # noqa: F401,F403
from .estimators import (ValueEstimate, duality_report, estimate_dual, estimate_primal, krylov_discretize,
                         primal_sweep, snap, standard_family)
from .girsanov import IntensityField, doleans_exponential, inverse_density, log_likelihood, truncate_intensity
from .jumps import (BallKernel, DensityKernel, MarkedPointProcess, PerturbationScheme, PointMassKernel,
                    TableKernel, build_skorohod_kernel, compensator_martingale_check, perturb_mpp,
                    sample_poisson_measure, superpose)
from .numerics import Numerics
from .sde import NoiseBundle, gain, simulate_primal, simulate_randomized

__version__ = "0.1.0"
