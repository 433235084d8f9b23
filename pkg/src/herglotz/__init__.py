"""Numerical toolkit for Herglotz' generalized variational principle."""

__version__ = "0.1.0"

from .caratheodory import CaratheodoryTrace, DiscretePath, solve  # noqa: E402
from .characteristics import ContactState, Orbit, flow, shoot  # noqa: E402
from .direct import MinimizeOptions, MinimizeResult, action_gradient, minimize  # noqa: E402
from .model import (  # noqa: E402
    HamiltonianModel,
    LagrangianModel,
    Registry,
    build_model,
    check_conditions,
    legendre_transform,
    make_hamiltonian,
)
from .oracle import BruteForceSpec, brute_force_min, discounted_value  # noqa: E402
from .value import ValueTable, build_table, check_equivalence, hj_residual, load_table, save_table  # noqa: E402

__all__ = [
    "BruteForceSpec",
    "CaratheodoryTrace",
    "ContactState",
    "DiscretePath",
    "HamiltonianModel",
    "LagrangianModel",
    "MinimizeOptions",
    "MinimizeResult",
    "Orbit",
    "Registry",
    "ValueTable",
    "action_gradient",
    "brute_force_min",
    "build_model",
    "build_table",
    "check_conditions",
    "check_equivalence",
    "discounted_value",
    "flow",
    "hj_residual",
    "legendre_transform",
    "load_table",
    "make_hamiltonian",
    "minimize",
    "save_table",
    "shoot",
    "solve",
]
