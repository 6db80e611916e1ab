"""
Acceptance checks, one test per criterion.

Each test prints a ``CRITERION n: PASS/FAIL`` line (shown with ``-s`` and
collected into the terminal summary by conftest.py) and then asserts.
Tolerances are the stated ones; infeasible configurations fail with the
reason in the printed line.

    pytest tests/test_acceptance.py -s
"""
import json
import time

import numpy as np
import pytest

from kdl.cli import main
from kdl.collision import CollisionKernel, collision_invariants, q_gain_direct, q_gain_spectral, q_loss_direct
from kdl.deflation import (
    DeflationParams,
    assemble_f_err,
    beta,
    build_fa,
    check_resolution,
    deflation_experiment,
    f_err_from_equation,
    required_grid,
    sphere_points,
)
from kdl.field import Dense, Grid, Trajectory
from kdl.inequalities import INEQUALITIES, check_inequality
from kdl.norms import z_norm
from kdl.solver import duhamel, picard_local_solve, solve_correction

# largest dense field the suite will allocate: 2^27 float64 nodes = 1 GiB
FIELD_BUDGET = 2 ** 27


def x_constant(grid, vals):
    return Dense(grid, np.broadcast_to(vals, (grid.n_x ** grid.d, vals.size)))


def maxwellian(grid, scale=1.0):
    v = grid.v_points()
    return x_constant(grid, scale * np.exp(-np.sum(v * v, axis=1)))


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def feasible(p):
    """Covering grid for the dense error terms and whether it fits FIELD_BUDGET."""
    need = required_grid(p, p.T_star)
    nodes = float(need.n_x) ** p.d * float(need.n_v) ** p.d
    return need, nodes, nodes <= FIELD_BUDGET


# ---------------------------------------------------------------- collision operator

def test_c01_detailed_balance(acceptance):
    t0 = time.perf_counter()
    grid = Grid(2, 1.0, 8, 4.0, 32)
    k = CollisionKernel(-0.5, "abs_cos")
    f = maxwellian(grid)
    gain = q_gain_direct(f, f, k, grid).flat()
    loss = q_loss_direct(f, f, k, grid).flat()
    gap = float(np.max(np.abs(gain - loss)) / np.max(np.abs(gain)))
    wall = time.perf_counter() - t0
    ok = gap <= 2e-2 and wall <= 60.0
    acceptance(1, ok, f"sup|Q+ - Q-|/sup|Q+| = {gap:.4g} (<= 2e-2), {wall:.1f} s (<= 60 s)")
    assert ok


def test_c02_direct_vs_spectral_gain(acceptance):
    t0 = time.perf_counter()
    grid = Grid(2, 1.0, 8, 4.0, 32)
    # the direct form with the diagonal cell restored; the spectral form has no cutoff
    k = CollisionKernel(-0.5, "abs_cos", self_cell=True)
    v = grid.v_points()
    rng = np.random.default_rng(2024)

    def smooth():
        out = np.zeros(v.shape[0])
        for _ in range(rng.integers(1, 4)):
            c = rng.uniform(-1.0, 1.0, 2)
            w = rng.uniform(0.6, 1.2)
            out += rng.uniform(0.5, 1.5) * np.exp(-np.sum((v - c) ** 2, axis=1) / w ** 2)
        return x_constant(grid, out)

    gaps = []
    for _ in range(10):
        f, g = smooth(), smooth()
        a = q_gain_direct(f, g, k, grid).flat()[0]
        b = q_gain_spectral(f, g, k, grid).flat()[0]
        gaps.append(rel_l2(a, b))
    wall = time.perf_counter() - t0
    worst = max(gaps)
    ok = worst <= 5e-2 and wall <= 300.0
    acceptance(2, ok, f"worst relative L2 gap over 10 pairs = {worst:.4g} (<= 5e-2), {wall:.1f} s (<= 300 s)")
    assert ok


def test_c03_conservation_trend(acceptance):
    k = CollisionKernel(-0.5, "abs_cos")
    mass = []
    for n_v in (16, 32, 64):
        grid = Grid(2, 1.0, 8, 4.0, n_v)
        mass.append(collision_invariants(maxwellian(grid), k, grid)[0])
    ok = mass[0] > mass[1] > mass[2] and mass[1] <= 1e-2
    acceptance(3, ok, "mass residual n_v=16/32/64: " + ", ".join(f"{m:.3g}" for m in mass)
               + " (decreasing, <= 1e-2 at 32)")
    assert ok


# ---------------------------------------------------------------- deflation

def test_c04_deflation_ratio(acceptance):
    t0 = time.perf_counter()
    ratios = []
    for M in (4, 8, 16):
        p = DeflationParams() if M == 4 else DeflationParams.desk(M)
        ratios.append(deflation_experiment(p, sphere_points(p.d, p.J), n_times=2).ratio)
    wall = time.perf_counter() - t0
    ok = ratios[0] >= 2.0 and ratios[0] < ratios[1] < ratios[2] and wall <= 600.0
    acceptance(4, ok, "ratio M=4/8/16: " + ", ".join(f"{r:.4f}" for r in ratios)
               + f" (>= 2 at defaults, increasing), {wall:.1f} s (<= 600 s)")
    assert ok


def test_c05_beta_bracket(acceptance):
    rng = np.random.default_rng(7)
    vals = {}
    for M in (4, 8):
        p = DeflationParams() if M == 4 else DeflationParams.desk(M)
        fam = sphere_points(p.d, p.J)

        def disc(n, radius):
            r = radius * np.sqrt(rng.random(n))
            th = 2.0 * np.pi * rng.random(n)
            return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)

        x, v = disc(64, 1.0 / p.M), disc(64, 1.0 / p.N1)
        scale = p.M ** ((p.d - 1) / 2 - p.s)
        vals[M] = np.concatenate([np.abs(beta(p, fam, t, x, v)) / (abs(t) * scale)
                                  for t in (p.T_star, p.T_star / 2, p.T_star / 8)])
    c1 = min(v.min() for v in vals.values())
    c2 = max(v.max() for v in vals.values())
    ok = c1 > 0 and c2 / c1 <= 50.0
    acceptance(5, ok, f"shared bracket [{c1:.4g}, {c2:.4g}] for M=4 and 8, c2/c1 = {c2 / c1:.4g} (<= 50)")
    assert ok


def test_c06_f_err_forms_agree(acceptance):
    # smallest admissible schedule: the direct quadrature must resolve both supports
    p = DeflationParams(M=2, N2=2, N1=2)
    fam = sphere_points(p.d, p.J)
    grid = Grid(2, 6.0, 32, 3.0, 32)
    a = assemble_f_err(p, fam, p.T_star, grid).values
    b = f_err_from_equation(p, fam, p.T_star, grid).values
    gap = rel_l2(a, b)
    ok = gap <= 3e-2
    acceptance(6, ok, f"relative L2 gap at t=T* (M=N2=N1=2, {grid.n_x}^2 x {grid.n_v}^2) = {gap:.4g} (<= 3e-2)")
    assert ok


def _duhamel_f_err_z(p, grid, n_times=5):
    fam = sphere_points(p.d, p.J)
    times = np.linspace(p.T_star, 0.0, n_times)
    src = Trajectory(times, [assemble_f_err(p, fam, t, grid) for t in times], grid)
    return z_norm(duhamel(src, p.T_star, 0.0), p.M, p.N2, p.gamma, p.r0)


def test_c07_error_term_trend(acceptance):
    sizes, blocked = [], []
    for N2 in (8, 16, 32):
        p = DeflationParams(N2=N2)
        need, nodes, fits = feasible(p)
        sizes.append(f"N2={N2}: {need.n_x}^2 x {need.n_v}^2 = {nodes:.3g} nodes")
        if not fits:
            blocked.append(N2)
    if blocked:
        acceptance(7, False, "infeasible: covering grids exceed the 1 GiB field budget ("
                   + "; ".join(sizes) + ")")
        pytest.fail("criterion 7 needs grids beyond the memory budget")
    z = []
    for N2 in (8, 16, 32):
        p = DeflationParams(N2=N2)
        grid = required_grid(p, p.T_star)
        check_resolution(p, grid)
        z.append(_duhamel_f_err_z(p, grid))
    ok = z[0] > z[1] > z[2]
    acceptance(7, ok, "Z-norm of the Duhamel error N2=8/16/32: " + ", ".join(f"{v:.4g}" for v in z))
    assert ok


def test_c08_correction_subordination(acceptance):
    p = DeflationParams()
    need, nodes, fits = feasible(p)
    if not fits:
        acceptance(8, False, f"infeasible at defaults: covering grid {need.n_x}^2 x {need.n_v}^2 = "
                   f"{nodes:.3g} nodes ({8.0 * nodes / 2 ** 30:.3g} GiB per field, budget 1 GiB)")
        pytest.fail("criterion 8 needs a grid beyond the memory budget")
    fam = sphere_points(p.d, p.J)
    times = np.linspace(p.T_star, 0.0, 9)
    _, z = solve_correction(p, fam, need, times, tol=1e-10, n_sub=8)
    za = [z_norm(build_fa(p, fam, t).sample(need), p.M, p.N2, p.gamma, p.r0) for t in times]
    sub = float(np.max(z) / np.min(za))
    growth = float(np.max(z[1:] / z[:-1]))
    ok = sub <= 0.2 and growth <= 2.5
    acceptance(8, ok, f"max z(f_c)/min z(f_a) = {sub:.4g} (<= 0.2), growth {growth:.4g} (<= 2.5)")
    assert ok


# ---------------------------------------------------------------- inequalities and solver

def test_c09_inequality_suite(acceptance):
    rows, ok = [], True
    for kind in INEQUALITIES:
        w100 = check_inequality(kind, trials=100, seed=0).worst_ratio
        w1000 = check_inequality(kind, trials=1000, seed=0).worst_ratio
        good = np.isfinite(w100) and np.isfinite(w1000) and w1000 <= 1.5 * w100
        ok &= bool(good)
        rows.append(f"{kind} {w100:.3g}->{w1000:.3g}")
    acceptance(9, ok, "worst ratio 100->1000 trials (inflation <= 50%): " + ", ".join(rows))
    assert ok


def test_c10_picard_contraction(acceptance):
    grid = Grid(2, 2.0, 8, 4.0, 32)
    f0 = maxwellian(grid, 1e-2)
    _, hist = picard_local_solve(f0, CollisionKernel(-0.5, "abs_cos"), 0.1, 4, tol=1e-30)
    ratios = hist[1:] / hist[:-1]
    run = best = 0
    for r in ratios:
        run = run + 1 if r <= 0.5 else 0
        best = max(best, run)
    ok = best >= 5
    acceptance(10, ok, f"{best} consecutive distance ratios <= 0.5 (need 5); max ratio {ratios.max():.3g}")
    assert ok


def test_c11_determinism(acceptance, tmp_path):
    runs = {
        "inequality-suite": (["--set", "trials=20", "--set", "seed=123"], "inequalities.json"),
        "deflation": (["--set", "seed=123"], "deflation.json"),
    }
    same = []
    for cmd, (sets, name) in runs.items():
        blobs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{cmd}-{tag}"
            assert main([cmd, *sets, "--out", str(out)]) == 0
            blobs.append((out / name).read_bytes())
        json.loads(blobs[0])
        same.append(blobs[0] == blobs[1])
    ok = all(same)
    acceptance(11, ok, "seeded reruns byte-identical: " + ", ".join(
        f"{c}={s}" for c, s in zip(runs, same)))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-v"]))
