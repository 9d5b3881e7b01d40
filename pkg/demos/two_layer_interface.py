"""Pressure near a permeability jump with CG, EG and DG.

A low-permeability layer sits under a permeable one.  Continuous pressure
overshoots at the interface shortly after loading; EG and DG do not.
"""
import numpy as np

from poroeg.config import parse_text
from poroeg.scenarios import build_problem
from poroeg.solver import run
from poroeg.spaces import evaluate

ys = np.linspace(0.3, 0.7, 9)
for method in ("CG", "EG", "DG"):
    cfg = parse_text(f"scenario = two_layer\nmethod = {method}\ntime.tau = 25 s\ntime.outputs = 25 s\n")
    pb = build_problem(cfg).problem
    res = run(pb)
    lx = cfg["mesh.lx"]
    pts = np.column_stack([np.full(len(ys), 0.3 * lx / cfg["mesh.nx"]), ys * cfg["mesh.ly"]])
    p = evaluate(pb.p_space, res.snapshots[25.0].p_curr, pts) / cfg["bc.sigma"]
    print(f"{method}: " + " ".join(f"{v:.3f}" for v in p))
