"""Recovery factor on the layered reservoir for three bulk moduli.

Softer rock compacts more, squeezing out more fluid.  Compares the
pressure-dependent (Picard) and pressure-independent permeability models.
"""
from poroeg.config import parse_text
from poroeg.scenarios import build_problem
from poroeg.solver import run

BASE = "scenario = structured_2d\nmethod = EG\nmesh.nx = 20\nmesh.ny = 20\noutput.vtk = false\n"

for K in (8, 2, 1):
    rf = {}
    for coupling in ("dependent", "independent"):
        cfg = parse_text(BASE + f"material.K = {K} GPa\ncoupling = {coupling}\n")
        res = run(build_problem(cfg).problem)
        rf[coupling] = res.recovery_factor[-1]
        if coupling == "dependent":
            iters = res.iteration_counts
    print(f"K = {K} GPa: RF {rf['dependent']:.4e} (independent {rf['independent']:.4e}), "
          f"Picard iterations {min(iters)}..{max(iters)}")
