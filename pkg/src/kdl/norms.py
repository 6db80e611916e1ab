"""
Weighted norms on phase-space fields.

Frequencies are the periodic samples 2*pi*k/(2L) of the box; every field we
measure is compactly supported well inside it, so the toroidal multipliers
stand in for their whole-space counterparts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .errors import ExponentError, RepresentationError, ResolutionError, ValidationError
from .field import (
    Analytic,
    Dense,
    Grid,
    PhaseField,
    Trajectory,
    cutoff_profile,
    fourier_multiplier,
    frequency_mesh,
    smooth_cutoff,
)


@dataclass(frozen=True)
class NormSpec:
    """Which norm to take: ``sobolev`` (s, r), ``z`` (M, N2, gamma, r0) or ``xsrb`` (s, r, b)."""

    kind: str
    s: float = 0.0
    r: float = 0.0
    b: float = 0.75
    M: float = 4.0
    N2: float = 8.0
    gamma: float = -0.5
    r0: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sobolev", "z", "xsrb"):
            raise ValidationError(f"unknown norm kind {self.kind!r}")
        if self.kind == "xsrb" and not 0.5 < self.b < 1.0:
            raise ExponentError(f"b must lie in (1/2, 1), got {self.b}")

    @classmethod
    def from_deflation(cls, s0: float, gamma: float) -> "NormSpec":
        return cls("sobolev", s=s0, r=max(0.0, s0 + gamma))


def japanese(x, power: float = 1.0) -> np.ndarray:
    """<x>^power = (1 + |x|^2)^(power/2); the last axis holds coordinates."""
    x = np.asarray(x, float)
    sq = x * x if x.ndim <= 1 else np.sum(x * x, axis=-1)
    return (1.0 + sq) ** (0.5 * power)


class GridPlan:
    """Integrate an Analytic field by sampling it on a Grid that covers its support."""

    shift_invariant = False

    def __init__(self, grid: Grid):
        self.grid = grid

    def sobolev(self, f: Analytic, s: float, r: float) -> float:
        return sobolev_norm(f.sample(self.grid), s, r)

    def profile(self, f: Analytic) -> "MixedProfile":
        return _grid_profile(f, self.grid)


class SumPlan:
    """Plan for a sum of fields with pairwise disjoint velocity supports."""

    def __init__(self, parts):
        self.parts = list(parts)
        self.shift_invariant = all(getattr(_as_plan(p, f), "shift_invariant", False)
                                   for f, p in self.parts)

    def sobolev(self, f, s: float, r: float) -> float:
        return float(np.sqrt(sum(sobolev_norm(g, s, r, p) ** 2 for g, p in self.parts)))

    def profile(self, f) -> "MixedProfile":
        profs = [mixed_profile(g, p) for g, p in self.parts]
        cat = lambda name: np.concatenate([getattr(q, name) for q in profs])
        return MixedProfile(profs[0].d, cat("v_points"), cat("v_weights"), cat("l2x"),
                            cat("l2x_grad"), cat("supx"), cat("supx_grad"))


def _as_plan(plan, f=None):
    plan = plan if plan is not None else getattr(f, "plan", None)
    if isinstance(plan, Grid):
        return GridPlan(plan)
    return plan


def _plan_for(f: PhaseField, plan):
    if not isinstance(f, Analytic):
        raise RepresentationError("unknown field representation")
    plan = _as_plan(plan, f)
    if plan is None:
        raise RepresentationError("an Analytic field needs a quadrature plan")
    return plan


def sobolev_norm(f: PhaseField, s: float, r: float, plan=None) -> float:
    """||<grad_x>^s <v>^r f||_{L^2_{x,v}} by Parseval in x.

    Analytic fields are integrated with ``plan`` (or their own ``f.plan``).
    """
    if not isinstance(f, Dense):
        return float(_plan_for(f, plan).sobolev(f, s, r))
    g = f.grid
    F = f.flat()
    spec = sfft.fftn(F.reshape((g.n_x,) * g.d + (-1,)), axes=tuple(range(g.d)))
    power = np.abs(spec) ** 2
    if s != 0.0:
        k = frequency_mesh(g, "x").reshape((g.n_x,) * g.d + (g.d,))
        power *= japanese(k, 2.0 * s)[..., None]
    per_v = power.reshape(-1, F.shape[1]).sum(axis=0) / F.shape[0]
    if r != 0.0:
        per_v = per_v * japanese(g.v_points(), 2.0 * r)
    return float(np.sqrt(per_v.sum() * g.cell_volume))


def lp_symbol(k, N: int) -> np.ndarray:
    """phi_N(k) = chi(k/N) - chi(2k/N) for N >= 2 and phi_1 = chi."""
    k = np.asarray(k, float)
    if N == 1:
        return smooth_cutoff(k)
    return smooth_cutoff(k / N) - smooth_cutoff(2.0 * k / N)


def lp_project(f: Dense, N: int, axis: str = "x") -> Dense:
    """Littlewood-Paley piece of frequency ~N along the x or v axes."""
    if axis not in ("x", "v"):
        raise ValidationError(f"axis must be 'x' or 'v', got {axis!r}")
    N = int(N)
    if N < 1 or N & (N - 1):
        raise ValidationError(f"N must be a dyadic integer, got {N}")
    h = f.grid.h_x if axis == "x" else f.grid.h_v
    nyq = np.pi / h
    if N > nyq:
        raise ResolutionError(f"N={N} exceeds the Nyquist frequency {nyq:.4g} of axis {axis}")
    return fourier_multiplier(f, axis, lambda k: lp_symbol(k, N))


def grad_x(f: Dense) -> np.ndarray:
    """Spectral x-gradient; trailing axis of size d. Nyquist modes are dropped."""
    g = f.grid
    k = g.x_freqs().copy()
    if g.n_x % 2 == 0:
        k[g.n_x // 2] = 0.0
    axes = tuple(range(g.d))
    spec = sfft.fftn(f.values, axes=axes)
    out = []
    for i in range(g.d):
        shape = [1] * (2 * g.d)
        shape[i] = g.n_x
        out.append(sfft.ifftn(1j * k.reshape(shape) * spec, axes=axes).real)
    return np.stack(out, axis=-1)


@dataclass
class MixedProfile:
    """Per-velocity x-norms of f and |grad_x f|, with velocity quadrature weights."""

    d: int
    v_points: np.ndarray
    v_weights: np.ndarray
    l2x: np.ndarray
    l2x_grad: np.ndarray
    supx: np.ndarray
    supx_grad: np.ndarray

    def scaled(self, a: float) -> "MixedProfile":
        a = abs(float(a))
        return MixedProfile(self.d, self.v_points, self.v_weights, a * self.l2x,
                            a * self.l2x_grad, a * self.supx, a * self.supx_grad)


def mixed_profile(f: PhaseField, plan=None) -> MixedProfile:
    """Mixed-norm profile of a Dense field, or of an Analytic one through its plan."""
    if isinstance(f, Dense):
        g = f.grid
        F = f.flat()
        G = np.sqrt(np.sum(grad_x(f) ** 2, axis=-1)).reshape(F.shape)
        hx = g.h_x ** g.d
        return MixedProfile(g.d, g.v_points(), np.full(F.shape[1], g.h_v ** g.d),
                            np.sqrt(hx * np.sum(F * F, axis=0)), np.sqrt(hx * np.sum(G * G, axis=0)),
                            np.max(np.abs(F), axis=0), np.max(G, axis=0))
    return _plan_for(f, plan).profile(f)


def _grid_profile(f: Analytic, plan: Grid, oversample: int = 4, chunk: int = 512) -> MixedProfile:
    """Profile on a sampling grid; sup norms over the x-support at ``oversample`` x finer spacing."""
    D = f.sample(plan)
    g = plan
    F = D.flat()
    hx = g.h_x ** g.d
    xs = g.x_points()
    vs = g.v_points()
    if f.grad_x is not None:
        G = np.zeros_like(F)
        inside = np.flatnonzero(np.any(F != 0.0, axis=0))
        if inside.size:
            gr = f.grad_x(xs[:, None, :], vs[inside][None, :, :])
            G[:, inside] = np.sqrt(np.sum(gr ** 2, axis=-1)) * f.support.contains(
                xs[:, None, :], vs[inside][None, :, :])
    else:
        G = np.sqrt(np.sum(grad_x(D) ** 2, axis=-1)).reshape(F.shape)
    # sup norms on an oversampled lattice over the x-support
    lo = np.maximum(f.support.x_lo, -g.L_x)
    hi = np.minimum(f.support.x_hi, g.L_x)
    step = g.h_x / oversample
    axes = [np.arange(a, b + 0.5 * step, step) for a, b in zip(lo, hi)]
    fine = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, g.d)
    supx = np.zeros(F.shape[1])
    supg = np.zeros(F.shape[1])
    cols = np.flatnonzero(np.any(F != 0.0, axis=0))
    vsel = vs[cols][None, :, :]
    for s in range(0, fine.shape[0], chunk):
        xc = fine[s:s + chunk, None, :]
        supx[cols] = np.maximum(supx[cols], np.max(np.abs(f.evaluate(xc, vsel)), axis=0))
        if f.grad_x is not None:
            gr = np.sqrt(np.sum(f.grad_x(xc, vsel) ** 2, axis=-1)) * f.support.contains(xc, vsel)
            supg[cols] = np.maximum(supg[cols], np.max(gr, axis=0))
    if f.grad_x is None:
        supg = np.max(G, axis=0)
    return MixedProfile(g.d, vs, np.full(F.shape[1], g.h_v ** g.d),
                        np.sqrt(hx * np.sum(F * F, axis=0)), np.sqrt(hx * np.sum(G * G, axis=0)),
                        supx, supg)


def z_terms(prof: MixedProfile, M: float, N2: float, gamma: float, r0: float) -> np.ndarray:
    """The six weighted summands of the Z-norm, in the order they are written."""
    d = prof.d
    w = prof.v_weights
    vw = japanese(prof.v_points, 2.0 * r0)
    l2 = lambda a: np.sqrt(np.sum(vw * a * a * w))
    l1 = lambda a: np.sum(a * w)
    l53 = lambda a: np.sum(a ** (5.0 / 3.0) * w) ** 0.6
    c = N2 ** (2.0 * d / 5.0 + gamma)
    return np.array([
        M ** ((d - 3) / 2.0) * l2(prof.l2x_grad),
        M ** ((d - 1) / 2.0) * l2(prof.l2x),
        N2 ** gamma * l1(prof.supx),
        c * l53(prof.supx),
        N2 ** gamma / M * l1(prof.supx_grad),
        c / M * l53(prof.supx_grad),
    ])


def z_norm(f, M: float, N2: float, gamma: float, r0: float, plan: Grid | None = None) -> float:
    """Six-term Z-norm: L^2 and velocity-integrated L^inf_x pieces of f and grad_x f."""
    prof = f if isinstance(f, MixedProfile) else mixed_profile(f, plan)
    return float(np.sum(z_terms(prof, M, N2, gamma, r0)))


def default_taper(times: np.ndarray) -> np.ndarray:
    """Smooth plateau: 1 on the middle half of the span, 0 at both ends."""
    times = np.asarray(times, float)
    c = 0.5 * (times[0] + times[-1])
    half = 0.5 * (times[-1] - times[0])
    return cutoff_profile(2.0 * np.abs(times - c) / half)


def xsrb_norm(traj: Trajectory, s: float, r: float, b: float, window=None) -> float:
    """Tapered X^{s,r,b} norm: L^2 of <tau + eta.v>^b <eta>^s <v>^r times the (t,x) transform."""
    K = len(traj)
    if K < 8:
        raise ValidationError(f"X^(s,r,b) norm needs at least 8 time samples, got {K}")
    g = traj.grid
    w = default_taper(traj.times) if window is None else np.asarray(window(traj.times), float)
    data = traj.stacked() * w.reshape((K,) + (1,) * (2 * g.d))
    nx = g.n_x ** g.d
    spec = sfft.fftn(data, axes=tuple(range(g.d + 1))).reshape(K, nx, -1)
    dt = traj.dt
    tau = 2.0 * np.pi * sfft.fftfreq(K, d=dt)
    eta = frequency_mesh(g, "x").reshape(nx, g.d)
    v = g.v_points()
    total = 0.0
    vw = japanese(v, 2.0 * r)
    ew = japanese(eta, 2.0 * s)
    for m in range(K):
        # scalar argument per (eta, v) pair, so no japanese() here
        weight = (1.0 + (tau[m] + eta @ v.T) ** 2) ** b if b != 0.0 else 1.0
        total += np.sum(np.abs(spec[m]) ** 2 * weight * ew[:, None] * vw[None, :])
    total *= dt * g.h_x ** g.d * g.h_v ** g.d / (K * nx)
    return float(np.sqrt(total))


def critical_indices(d: int, gamma: float):
    """Scaling-critical regularity (d-2)/2 and the matching weight map s -> s + gamma."""
    if d not in (2, 3):
        raise ValidationError(f"dimension must be 2 or 3, got {d}")
    return (d - 2) / 2.0, (lambda s: s + gamma)


from .inequalities import INEQUALITIES, InequalityReport, check_inequality  # noqa: E402,F401
