"""Biot poroelasticity with strain-dependent permeability.

Displacement is approximated with vector P2 Lagrange elements; pressure with
continuous (CG), enriched (EG = CG + piecewise constants) or discontinuous
(DG) Galerkin elements and a symmetric interior penalty.
"""
from .config import ConfigError, SimulationConfig, parse_config, parse_text
from .mesh import Mesh, generate_box_mesh, unit_cube, unit_square
from .physics import MaterialField
from .scenarios import build_problem
from .solver import Problem, RunResult, SolverError, run, run_pressure_dependent, run_pressure_independent
from .spaces import build_space

__version__ = "0.1.0"

__all__ = ["ConfigError", "SimulationConfig", "parse_config", "parse_text", "Mesh", "generate_box_mesh",
           "unit_cube", "unit_square", "MaterialField", "build_problem", "Problem", "RunResult", "SolverError",
           "run", "run_pressure_dependent", "run_pressure_independent", "build_space"]
