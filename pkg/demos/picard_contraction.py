"""Local Picard iteration for small Maxwellian data: successive distances and their ratios."""
import numpy as np

from kdl.collision import CollisionKernel
from kdl.errors import DivergenceError
from kdl.field import Dense, Grid
from kdl.solver import duhamel_residual, picard_local_solve

grid = Grid(2, 2.0, 8, 4.0, 32)
x, v = grid.x_points(), grid.v_points()
rho = 1.0 + 0.5 * np.cos(np.pi * x[:, 0] / grid.L_x)
kernel = CollisionKernel(-0.5)

for eps in (1e-2, 1.0, 10.0):
    f0 = Dense(grid, eps * rho[:, None] * np.exp(-np.sum(v * v, axis=1))[None, :])
    try:
        traj, hist = picard_local_solve(f0, kernel, 0.1, 4, tol=1e-14 * eps)
    except DivergenceError as exc:
        print(f"eps={eps:g}: diverged, distances {np.array2string(np.asarray(exc.history), precision=3)}")
        continue
    ratios = hist[1:] / hist[:-1]
    print(f"eps={eps:g}: {hist.size} iterations, max ratio {ratios.max():.3g}, "
          f"residual {duhamel_residual(traj, f0, kernel):.2e}")
