"""Embedded-fiber solver: geometrically exact rods coupled to a hyperelastic matrix."""

from .assembly import (
    FiberDiscretization,
    FiberSpec,
    Problem,
    assemble,
    average_piola,
    beam_energy,
    build_dof_map,
    constraint_report,
    matrix_energy,
    set_initial_state,
    total_energy,
    validate_order_ladder,
)
from .bspline import Patch3D
from .cases import (
    CaseConfig,
    CaseError,
    CaseReport,
    build_problem,
    export_centerline,
    export_vtk,
    moment_balance,
    parse_case,
    preset_bending,
    preset_rve,
    preset_shear,
    preset_torsion,
    run_case,
    sample_centerline,
    serialize_case,
)
from .materials import (
    MooneyRivlinInvariant,
    MooneyRivlinPolyconvex,
    SaintVenantKirchhoff,
)
from .solver import newton_solve, solve_with_load_steps

__version__ = "0.1.0"

__all__ = [
    "CaseConfig",
    "CaseError",
    "CaseReport",
    "FiberDiscretization",
    "FiberSpec",
    "MooneyRivlinInvariant",
    "MooneyRivlinPolyconvex",
    "Patch3D",
    "Problem",
    "SaintVenantKirchhoff",
    "assemble",
    "average_piola",
    "beam_energy",
    "build_dof_map",
    "build_problem",
    "constraint_report",
    "export_centerline",
    "export_vtk",
    "matrix_energy",
    "moment_balance",
    "newton_solve",
    "parse_case",
    "preset_bending",
    "preset_rve",
    "preset_shear",
    "preset_torsion",
    "run_case",
    "sample_centerline",
    "serialize_case",
    "set_initial_state",
    "solve_with_load_steps",
    "total_energy",
    "validate_order_ladder",
]
