"""Numerical laboratory for contact Hamilton-Jacobi equations on the 1-D torus.

Evolves the backward/forward variational semigroups with semi-Lagrangian
schemes, computes critical values and minimizing occupational measures,
verifies stability and instability criteria for stationary solutions, and
measures homogenization rates for two-scale problems.
"""

__version__ = "0.1.0"

from .expr import parse
from .grid import Field, TorusGrid, field_from_expr, sup_diff
from .hamiltonian import HamiltonianSpec, LagrangianTable, builtin, legendre

__all__ = [
    "parse",
    "Field",
    "TorusGrid",
    "field_from_expr",
    "sup_diff",
    "HamiltonianSpec",
    "LagrangianTable",
    "builtin",
    "legendre",
]
