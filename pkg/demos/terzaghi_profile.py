"""Terzaghi consolidation: EG pressure against the series solution.

Run with ``python demos/terzaghi_profile.py``.  Prints the normalized
pressure at a few depths for each output time.
"""
import numpy as np

from poroeg.config import parse_text
from poroeg.scenarios import build_problem
from poroeg.solver import run
from poroeg.spaces import evaluate
from poroeg.verification import TerzaghiParams

cfg = parse_text("scenario = terzaghi\nmethod = EG\n")
pb = build_problem(cfg).problem
res = run(pb)

tp = TerzaghiParams()
depth = np.array([0.1, 0.3, 0.5, 0.7, 0.9])       # below the drained top face
pts = np.column_stack([np.full(len(depth), 0.05), 1.0 - depth])
print(f"c_v = {tp.c_v:.3e} m^2/s; columns are numerical/series p/sigma at depths {depth}")
for t, state in sorted(res.snapshots.items()):
    num = evaluate(pb.p_space, state.p_curr, pts) / tp.sigma
    exact = tp.pressure(pts[:, 1], t) / tp.sigma
    print(f"t = {t:5.0f} s  " + "  ".join(f"{a:.4f}/{b:.4f}" for a, b in zip(num, exact)))
