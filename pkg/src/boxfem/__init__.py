"""boxfem: nodally bound-preserving, mass-conservative finite elements for
fourth-order elliptic and parabolic problems, with BDF time stepping, SAV
stabilization and a primal-dual active-set solver."""

__version__ = "0.1.0"

from .assembly import (Coefficient, assemble_load, assemble_mass,
                       assemble_stiffness, unit_system)
from .linsolve import (BlockSystem, SingularSystemError, WeightedPoisson,
                       h_minus1_apply)
from .mesh import (FeSpace, Mesh, NodalVector, QuadratureRule, build_space,
                   evaluate, evaluate_many, interpolate, interval, rectangle)
from .pdas import (BoxBounds, PdasConfig, PdasFailure, PdasReport, SavCoupling,
                   ViProblem, energy_value, kkt_residual, pdas_solve,
                   unconstrained_solve)
from .schemes import (BdfTable, SavConfig, TimeState, bdf_table,
                      extrapolate_clamped, init_postprocess, init_vi, sav_init,
                      solve_second_order_stationary, solve_stationary,
                      step_fourth_order, step_sav, step_second_order)
from .structure import (Diagnostics, bp_mc_project, diagnostics, eoc,
                        error_norms)

__all__ = [name for name in dir() if not name.startswith("_")]
