"""
Evolution machinery: free transport, Duhamel sums, the damping ODE of the
core, Picard iteration for the local problem and for the correction term.

All Dense evolutions are exact spectral shifts per velocity node, so the only
time-discretization error is the trapezoid rule in the Duhamel integrals.
"""
from __future__ import annotations

import csv
import io

import numpy as np
from scipy import fft as sfft

from .collision import CollisionKernel, q_gain_direct, q_gain_spectral, q_loss_direct, q_loss_spectral
from .errors import DivergenceError, RepresentationError, SpanError, ValidationError, WraparoundError
from .field import Analytic, Dense, Grid, PhaseField, Trajectory
from .norms import z_norm

__all__ = [
    "Trajectory",
    "free_transport",
    "duhamel",
    "fr_ode_evolve",
    "picard_local_solve",
    "solve_correction",
    "history_csv",
]


# ---------------------------------------------------------------- free transport

def _phase(grid: Grid, t: float) -> np.ndarray:
    """exp(-i t k.v) over (x-frequency, v-node); the Nyquist row is left unshifted."""
    d = grid.d
    k = grid.x_freqs().copy()
    if grid.n_x % 2 == 0:
        k[grid.n_x // 2] = 0.0
    v = grid.v_axis()
    arg = 0.0
    for i in range(d):
        ks = [1] * (2 * d)
        ks[i] = grid.n_x
        vs = [1] * (2 * d)
        vs[d + i] = grid.n_v
        arg = arg + k.reshape(ks) * v.reshape(vs)
    return np.exp(-1j * t * arg)


def _shift(values: np.ndarray, grid: Grid, t: float) -> np.ndarray:
    if t == 0.0:
        return values.copy()
    axes = tuple(range(grid.d))
    spec = sfft.fftn(values, axes=axes)
    spec *= _phase(grid, t)
    return sfft.ifftn(spec, axes=axes).real


def _check_wrap(f: Dense, t: float, rel: float = 1e-12) -> None:
    """The shifted x-support must stay inside the node hull.

    An axis along which the data already fills the whole period (x-constant
    or periodic data) is not checked.
    """
    g = f.grid
    d = g.d
    vals = np.abs(f.values)
    top = vals.max(initial=0.0)
    if top == 0.0 or t == 0.0:
        return
    mask = vals > rel * top
    xa, va = g.x_axis(), g.v_axis()
    for i in range(d):
        x_occ = np.any(mask, axis=tuple(a for a in range(2 * d) if a != i))
        if x_occ.all():
            continue
        v_occ = np.any(mask, axis=tuple(a for a in range(2 * d) if a != d + i))
        lo, hi = xa[x_occ].min(), xa[x_occ].max()
        s = t * va[v_occ]
        if lo + s.min() < xa[0] - 1e-12 or hi + s.max() > xa[-1] + 1e-12:
            raise WraparoundError(
                f"transport by t={t} moves the support past the box on x-axis {i} "
                f"(support [{lo:.4g}, {hi:.4g}], shift up to {np.abs(s).max():.4g}, L_x={g.L_x})")


def free_transport(f: PhaseField, t: float, check: bool = True) -> PhaseField:
    """e^{-t v.grad_x} f: f(x - v t, v).

    Dense fields are shifted spectrally per velocity node; Analytic fields are
    composed with the characteristic and keep shift-invariant norm plans.
    """
    t = float(t)
    if isinstance(f, Dense):
        if check:
            _check_wrap(f, t)
        return Dense(f.grid, _shift(f.values, f.grid, t))
    if isinstance(f, Analytic):
        if t == 0.0:
            return f
        ev = f.evaluator
        comp = lambda x, v: ev(np.asarray(x, float) - t * np.asarray(v, float), v)
        grad = None
        if f.grad_x is not None:
            g0 = f.grad_x
            grad = lambda x, v: g0(np.asarray(x, float) - t * np.asarray(v, float), v)
        plan = f.plan if getattr(f.plan, "shift_invariant", False) else None
        return Analytic(comp, f.support.transported(t), grad_x=grad, plan=plan)
    raise RepresentationError("free_transport needs a Dense or Analytic field")


# ---------------------------------------------------------------- Duhamel

def _field_at(traj: Trajectory, t: float) -> np.ndarray:
    """Linear interpolation in time between mesh fields."""
    ts = traj.times
    k = int(np.clip(np.searchsorted(ts, t) - 1, 0, ts.size - 2)) if ts.size > 1 else 0
    if ts.size == 1 or abs(t - ts[k]) <= 1e-12 * max(1.0, abs(t)):
        return traj.fields[k].values
    if abs(t - ts[k + 1]) <= 1e-12 * max(1.0, abs(t)):
        return traj.fields[k + 1].values
    a = (t - ts[k]) / (ts[k + 1] - ts[k])
    return (1.0 - a) * traj.fields[k].values + a * traj.fields[k + 1].values


def duhamel(source: Trajectory, t_lo: float, t_hi: float) -> Dense:
    """Trapezoid sum of free_transport(S(t0), t_hi - t0) over the mesh nodes in [t_lo, t_hi].

    The integral is oriented: with t_lo > t_hi it runs backwards and carries
    the sign of dt.  Endpoints off the mesh are filled by linear interpolation.
    """
    ts = source.times
    a, b = min(t_lo, t_hi), max(t_lo, t_hi)
    tol = 1e-12 * max(1.0, abs(ts[0]), abs(ts[-1]))
    if a < ts[0] - tol or b > ts[-1] + tol:
        raise SpanError(f"[{a}, {b}] is outside the trajectory span [{ts[0]}, {ts[-1]}]")
    g = source.grid
    if a == b:
        return Dense.zeros(g)
    inner = ts[(ts > a + tol) & (ts < b - tol)]
    nodes = np.concatenate([[a], inner, [b]])
    w = np.zeros(nodes.size)
    dt = np.diff(nodes)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    sign = 1.0 if t_hi >= t_lo else -1.0
    out = np.zeros(g.shape)
    for tn, wn in zip(nodes, w):
        out += wn * _shift(_field_at(source, tn), g, t_hi - tn)
    return Dense(g, sign * out)


# ---------------------------------------------------------------- damping ODE of the core

def fr_ode_evolve(p, fam, times, grid: Grid | None = None):
    """March d/dt f_r = -lambda f_r backwards from t = 0 with an exponential integrator.

    Returns (ode, closed): the ODE trajectory and build_fr sampled at the same
    times.  Each step integrates lambda by the trapezoid rule on enough
    sub-nodes that the total matches the beta quadrature's j_schedule.
    """
    from .deflation import beta_engine, build_fr, fr_plan

    times = np.asarray(times, float)
    if times.size < 2 or np.any(np.diff(times) <= 0):
        raise ValidationError("times must be strictly increasing with at least two entries")
    if times[0] < p.T_star - 1e-12 or times[-1] > 1e-12:
        raise ValidationError(f"times must lie in [T_star, 0] = [{p.T_star}, 0]")
    grid = grid or fr_plan(p)
    closed = [build_fr(p, fam, t).sample(grid) for t in times]
    eng = beta_engine(p, fam)
    F = closed[-1].flat() if abs(times[-1]) <= 1e-12 else build_fr(p, fam, 0.0).sample(grid).flat()
    rows = np.flatnonzero(np.any(F != 0.0, axis=1))
    cols = np.flatnonzero(np.any(F != 0.0, axis=0))
    X, V = grid.x_points()[rows], grid.v_points()[cols]
    sub = max(1, int(np.ceil((p.j_schedule - 1) / max(1, times.size - 1))))
    cur = F.copy()
    start = times[-1]
    if abs(start) > 1e-12:
        cur[np.ix_(rows, cols)] *= np.exp(_rate_integral(eng, start, 0.0, X, V, 2 * sub))
    out = [None] * times.size
    out[-1] = Dense(grid, cur.copy())
    for k in range(times.size - 1, 0, -1):
        cur[np.ix_(rows, cols)] *= np.exp(_rate_integral(eng, times[k - 1], times[k], X, V, sub))
        out[k - 1] = Dense(grid, cur.copy())
    return Trajectory(times, out, grid), Trajectory(times, closed, grid)


def _rate_integral(eng, t0: float, t1: float, X, V, n: int) -> np.ndarray:
    nodes = np.linspace(t0, t1, n + 1)
    w = np.full(n + 1, (t1 - t0) / n)
    w[[0, -1]] *= 0.5
    return eng.integral(X, V, nodes, w)[0]


# ---------------------------------------------------------------- Picard iteration

def _collide(f: np.ndarray, g: np.ndarray, kernel: CollisionKernel, grid: Grid, mode: str) -> np.ndarray:
    if not (np.any(f) and np.any(g)):
        return np.zeros(grid.shape)
    F, G = Dense(grid, f), Dense(grid, g)
    if mode == "spectral":
        gain, loss = q_gain_spectral(F, G, kernel, grid), q_loss_spectral(F, G, kernel, grid)
    else:
        gain, loss = q_gain_direct(F, G, kernel, grid), q_loss_direct(F, G, kernel, grid)
    return gain.values - loss.values


def _l2(a: np.ndarray, grid: Grid) -> float:
    return float(np.sqrt(np.sum(a * a) * grid.cell_volume))


def _picard(data: np.ndarray, nodes: np.ndarray, source, increment, grid: Grid, tol: float,
            max_iter: int):
    """Fixed point of f(t) = S(t - t_0) data + int_{t_0}^t S(t - s) source(f)(s) ds on ``nodes``.

    nodes[0] is the data time; nodes run monotonically in either direction.
    Transport is a group, so source terms are pulled back to the data frame,
    summed cumulatively, and pushed forward once.

    The source is bilinear plus affine, so successive sources differ by
    ``increment(f_prev, f_cur, delta)``, an expression linear in the last
    update delta.  Iterating on updates gives the same iterates as the plain
    map while keeping the update sizes (the reported distances: sup over
    nodes of the L^2 norm) at full relative precision.
    """
    tau = nodes - nodes[0]
    K = nodes.size

    def duh(S):
        pulled = [_shift(S[k], grid, -tau[k]) for k in range(K)]
        acc = np.zeros(grid.shape)
        out = [np.zeros(grid.shape)]
        for k in range(1, K):
            acc += 0.5 * (tau[k] - tau[k - 1]) * (pulled[k - 1] + pulled[k])
            out.append(_shift(acc, grid, tau[k]))
        return out

    prev = None
    cur = [_shift(data, grid, s) for s in tau]
    delta = duh(source(cur))
    history = []
    for it in range(max_iter):
        if it > 0:
            delta = duh(increment(prev, cur, delta))
        prev, cur = cur, [a + b for a, b in zip(cur, delta)]
        dist = max(_l2(b, grid) for b in delta)
        history.append(dist)
        if dist <= tol:
            return cur, np.array(history), True
        if len(history) >= 3 and history[-1] > history[-2] > history[-3]:
            raise DivergenceError("successive iterates grew twice in a row", np.array(history))
    return cur, np.array(history), False


def picard_local_solve(f0: Dense, kernel: CollisionKernel, T: float, n_steps: int, tol: float,
                       max_iter: int = 25, mode: str = "direct"):
    """Solve f(t) = e^{-t v.grad} f0 + int_0^t e^{-(t-s) v.grad} Q(f, f)(s) ds on [0, T] (or [T, 0]).

    Returns (trajectory, distances); stops when the distance between
    successive iterates drops to ``tol`` or
    after ``max_iter`` iterations.
    """
    if not isinstance(f0, Dense):
        raise RepresentationError("picard_local_solve needs Dense data")
    if n_steps < 1 or T == 0:
        raise ValidationError("need n_steps >= 1 and T != 0")
    if mode not in ("direct", "spectral"):
        raise ValidationError(f"mode must be direct or spectral, got {mode!r}")
    kernel.validate(f0.grid.d)
    g = f0.grid
    nodes = np.linspace(0.0, T, n_steps + 1)
    _check_wrap(f0, T)
    src = lambda fs: [_collide(f, f, kernel, g, mode) for f in fs]
    inc = lambda fp, fc, ds: [_collide(d, c, kernel, g, mode) + _collide(a, d, kernel, g, mode)
                              for a, c, d in zip(fp, fc, ds)]
    fields, hist, _ = _picard(f0.values, nodes, src, inc, g, tol, max_iter)
    order = np.argsort(nodes)
    return Trajectory(nodes[order], [Dense(g, fields[i]) for i in order], g), hist


def duhamel_residual(traj: Trajectory, f0: Dense, kernel: CollisionKernel, mode: str = "direct") -> float:
    """sup_t ||f(t) - Phi(f)(t)||_{L^2} for the discrete Duhamel map Phi of picard_local_solve."""
    g = traj.grid
    t0 = int(np.argmin(np.abs(traj.times)))
    if abs(traj.times[t0]) > 1e-12:
        raise ValidationError("trajectory does not contain t = 0")
    idx = np.arange(traj.times.size) if t0 == 0 else np.arange(traj.times.size)[::-1]
    nodes = traj.times[idx]
    fs = [traj.fields[i].values for i in idx]
    src = lambda vals: [_collide(f, f, kernel, g, mode) for f in vals]
    tau = nodes - nodes[0]
    S = src(fs)
    acc = np.zeros(g.shape)
    worst = _l2(fs[0] - f0.values, g)
    for k in range(1, nodes.size):
        acc += 0.5 * (tau[k] - tau[k - 1]) * (_shift(S[k - 1], g, -tau[k - 1]) + _shift(S[k], g, -tau[k]))
        phi = _shift(f0.values + acc, g, tau[k])
        worst = max(worst, _l2(fs[k] - phi, g))
    return worst


# ---------------------------------------------------------------- correction term

def solve_correction(p, fam, grid: Grid, times, tol: float, n_sub: int = 8, max_iter: int = 25,
                     f_err=None, f_a=None):
    """Solve d_t f_c + v.grad f_c = Q(f_c, f_a) + Q(f_a, f_c) + Q(f_c, f_c) - F_err, f_c(0) = 0.

    ``times`` is a uniform ascending mesh of [T_star, 0] with n_sub * m + 1
    nodes.  The solve runs backwards from t = 0 over n_sub subintervals, each
    by Picard iteration with f_a frozen at the mesh times.  ``f_err`` and
    ``f_a`` are optional callables t -> Dense overriding the construction.

    Returns (trajectory of f_c, sup-in-time Z-norm of f_c per subinterval).
    """
    from .deflation import assemble_f_err, build_fa

    times = np.asarray(times, float)
    if times.size < 2 or np.any(np.diff(times) <= 0):
        raise ValidationError("times must be strictly increasing")
    if abs(times[-1]) > 1e-12 or times[0] < p.T_star - 1e-12:
        raise ValidationError(f"times must run from within [T_star, 0] up to 0")
    if (times.size - 1) % n_sub:
        raise ValidationError(f"{times.size - 1} steps do not split into {n_sub} subintervals")
    m = (times.size - 1) // n_sub
    kernel = p.kernel
    f_err = f_err or (lambda t: assemble_f_err(p, fam, t, grid))
    f_a = f_a or (lambda t: build_fa(p, fam, t).sample(grid))
    E = [f_err(t).values for t in times]
    A = [f_a(t).values for t in times]
    K = times.size
    fc = [None] * K
    fc[-1] = np.zeros(grid.shape)
    z_hist = []
    zn = lambda a: z_norm(Dense(grid, a), p.M, p.N2, p.gamma, p.r0)
    for j in range(n_sub):
        idx = np.arange(K - 1 - j * m, K - 2 - (j + 1) * m, -1)       # descending, data first
        nodes = times[idx]

        def src(fs, idx=idx):
            out = []
            for f, k in zip(fs, idx):
                a = A[k]
                q = (_collide(f, a, kernel, grid, "direct") + _collide(a, f, kernel, grid, "direct")
                     + _collide(f, f, kernel, grid, "direct"))
                out.append(q - E[k])
            return out

        def inc(fp, fcur, ds, idx=idx):
            out = []
            for a_, c_, d_, k in zip(fp, fcur, ds, idx):
                a = A[k]
                out.append(_collide(d_, a, kernel, grid, "direct") + _collide(a, d_, kernel, grid, "direct")
                           + _collide(d_, c_, kernel, grid, "direct") + _collide(a_, d_, kernel, grid, "direct"))
            return out

        try:
            fields, hist, _ = _picard(fc[idx[0]], nodes, src, inc, grid, tol, max_iter)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), exc.history, subinterval=j) from None
        for k, f in zip(idx, fields):
            fc[k] = f
        z_hist.append(max(zn(f) for f in fields))
    traj = Trajectory(times, [Dense(grid, f) for f in fc], grid)
    return traj, np.array(z_hist)


def history_csv(values, label: str = "iteration") -> str:
    """Two-column CSV (index, value) of a residual or Z-norm history."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([label, "value"])
    for i, v in enumerate(values):
        w.writerow([i, format(float(v), ".17g")])
    return buf.getvalue()
