"""Correction solve at the smallest deflation schedule on a window [w T*, 0].

At M = N2 = N1 = 2 the dense error terms fit on a 32^2 x 16^2 grid.  Over
the full window [T*, 0] the Picard subproblems need many short subintervals;
a short window shows the growth and subordination diagnostics cheaply.
Expect a few minutes per window.
"""
import numpy as np

from kdl.deflation import DeflationParams, build_fa, sphere_points
from kdl.field import Grid
from kdl.norms import z_norm
from kdl.solver import solve_correction

p = DeflationParams(M=2, N2=2, N1=2)
fam = sphere_points(p.d, p.J)
grid = Grid(2, 6.0, 32, 3.0, 16)

for window in (0.0625, 0.125):
    times = np.linspace(window * p.T_star, 0.0, 5)
    _, z = solve_correction(p, fam, grid, times, tol=1e-10, n_sub=4)
    za = [z_norm(build_fa(p, fam, t).sample(grid), p.M, p.N2, p.gamma, p.r0) for t in times]
    print(f"window {window}: z(f_c) per subinterval {np.round(z, 4).tolist()}")
    print(f"    growth {np.round(z[1:] / z[:-1], 3).tolist()}, "
          f"max z(f_c) / min z(f_a) = {np.max(z) / np.min(za):.3f}")
