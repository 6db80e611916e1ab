"""
The norm-deflation construction.

f_b is a family of J velocity bumps I_j centred at N2 e_j, each carried by
a tube K_j along e_j and freely transported.  f_r is a concentrated core
damped by exp(-beta), where beta integrates the loss rate that f_b imposes
on it.  Everything is lazy (Analytic): a grid resolving the tube width 1/M
and the tube length N2 at once is out of reach even in d = 2.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy import fft as sfft
from scipy import integrate
from scipy.spatial import cKDTree

from .collision import CollisionKernel, q_gain_direct, q_loss_direct
from .errors import GridError, ParameterError, ResolutionError, UnsupportedError
from .field import Analytic, Box, Dense, Grid, cutoff_profile, cutoff_profile_deriv
from .jsonio import dumps
from .norms import GridPlan, MixedProfile, NormSpec, SumPlan, grad_x, japanese, sobolev_norm, z_norm


# ---------------------------------------------------------------- parameters

def sector_angle(M: float, N2: float) -> float:
    """Largest angle between e_j and a point of supp I_j."""
    return float(np.arctan((2.0 / M) / (0.8 * N2)))


def packing_J(d: int, M: float, N2: float) -> int:
    """Largest J <= 2 (M N2)^(d-1) whose lattice keeps the I_j supports disjoint.

    Never below (M N2)^(d-1) / 2; in d = 3 the Fibonacci lattice reaches that
    floor before it separates the sectors, and the sector norm plan then
    reports the overlap.
    """
    th = 2.0 * sector_angle(M, N2)
    top = int(np.floor(2.0 * (M * N2) ** (d - 1)))
    if d == 2:
        J = min(top, int(np.floor(2.0 * np.pi / th)))
        while J > 4 and 2.0 * np.pi / J <= th:
            J -= 1
        return max(J, int(np.ceil(M * N2 / 2.0)))
    lo, hi = 4, top
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if _fib_min_angle(mid) > th:
            lo = mid
        else:
            hi = mid - 1
    return max(lo, int(np.ceil((M * N2) ** (d - 1) / 2.0)))


@dataclass(frozen=True)
class DeflationParams:
    """Desk-scale parameters; ``None`` entries are derived in ``__post_init__``.

    r0 = max(0, s0 + gamma), T_star = -0.2 M^(s-(d-1)/2), and J is the densest
    sphere lattice whose velocity sectors stay pairwise disjoint (``packing_J``).
    """

    d: int = 2
    gamma: float = -0.5
    M: float = 4.0
    N1: float = 32.0
    N2: float = 8.0
    s0: float = 0.25
    s: float = 0.45
    r0: float | None = None
    J: int | None = None
    T_star: float | None = None
    j_schedule: int = 32
    u_nodes: int = 16
    angular: str = "abs_cos"
    allow_hard: bool = False

    def __post_init__(self):
        d = self.d
        if d not in (2, 3):
            raise ParameterError(f"dimension must be 2 or 3, got {d}")
        r0 = max(0.0, self.s0 + self.gamma)
        if self.r0 is None:
            object.__setattr__(self, "r0", r0)
        elif abs(self.r0 - r0) > 1e-12:
            raise ParameterError(f"r0 must equal max(0, s0 + gamma) = {r0}, got {self.r0}")
        if self.J is None:
            object.__setattr__(self, "J", packing_J(d, self.M, self.N2))
        if self.T_star is None:
            object.__setattr__(self, "T_star", -0.2 * self.M ** (self.s - (d - 1) / 2.0))
        self.validate()

    def validate(self) -> None:
        d, half = self.d, (self.d - 1) / 2.0
        if not (self.N1 >= self.N2 >= self.M >= 2):
            raise ParameterError(f"need N1 >= N2 >= M >= 2, got N1={self.N1}, N2={self.N2}, M={self.M}")
        if not (0 <= self.s0 < half and self.s0 < self.s < half):
            raise ParameterError(f"need 0 <= s0 < s < (d-1)/2 = {half}, got s0={self.s0}, s={self.s}")
        if not (self.T_star < 0 and abs(self.T_star) <= 0.25):
            raise ParameterError(f"need -1/4 <= T_star < 0, got {self.T_star}")
        ref = (self.M * self.N2) ** (d - 1)
        if not (self.J >= 4 and ref / 2 <= self.J <= 2 * ref):
            raise ParameterError(f"J={self.J} must be >= 4 and within a factor 2 of (M N2)^(d-1) = {ref}")
        if self.gamma > 0:
            if not self.allow_hard:
                raise ParameterError(f"gamma={self.gamma} > 0 needs allow_hard=True")
        else:
            lo = -(d - 1) / 2.0
            if self.gamma < lo:
                raise ParameterError(f"gamma={self.gamma} violates -(d-1)/2 <= gamma <= 0 ({lo} <= gamma <= 0)")
        if self.j_schedule < 2 or self.u_nodes < 4:
            raise ParameterError("j_schedule must be >= 2 and u_nodes >= 4")
        if not 2.0 / self.N1 < 0.8 * self.N2:
            raise ParameterError("velocity supports of f_r and f_b overlap")

    @classmethod
    def desk(cls, M: float, **kw) -> "DeflationParams":
        """The default schedule scaled with M: N2 = 2M, N1 = 8M."""
        kw.setdefault("N2", 2.0 * M)
        kw.setdefault("N1", 8.0 * M)
        return cls(M=M, **kw)

    @property
    def amp_b(self) -> float:
        return self.M ** ((self.d - 1) / 2.0 - self.s) / self.N2 ** (self.d + self.gamma)

    @property
    def amp_r(self) -> float:
        return self.M ** (self.d / 2.0 - self.s) * self.N1 ** (self.d / 2.0)

    @property
    def kernel(self) -> CollisionKernel:
        return CollisionKernel(gamma=self.gamma, angular=self.angular)

    @property
    def b_norm(self) -> float:
        return self.kernel.b_l1(self.d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- sphere points

@dataclass(frozen=True)
class BumpFamily:
    """Unit vectors e_j with orthonormal frames; frames[j, 0] = e_j, frames[j, 1:] span e_j-perp."""

    points: np.ndarray
    frames: np.ndarray
    min_angle: float
    tree: cKDTree = dc_field(repr=False, compare=False)

    @property
    def J(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def candidates(self, vhat: np.ndarray, max_angle: float):
        """Indices of all e_j within ``max_angle`` of each direction (padded; mask marks valid)."""
        chord = 2.0 * np.sin(min(max_angle, np.pi) / 2.0) + 1e-12
        k = min(self.J, 4 if self.d == 2 else 8)
        while True:
            dist, idx = self.tree.query(vhat, k=k)
            dist = dist.reshape(len(vhat), k)
            idx = idx.reshape(len(vhat), k)
            if k == self.J or not np.any(dist[:, -1] <= chord):
                return idx, dist <= chord
            k = min(self.J, 2 * k)


def _perp_frame(e: np.ndarray) -> np.ndarray:
    if e.size == 2:
        return np.array([[-e[1], e[0]]])
    a = np.array([0.0, 0.0, 1.0]) if abs(e[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u1 = a - (a @ e) * e
    u1 /= np.linalg.norm(u1)
    return np.stack([u1, np.cross(e, u1)])


def _fib_points(J: int) -> np.ndarray:
    i = np.arange(J)
    z = 1.0 - (2.0 * i + 1.0) / J
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def _min_angle(pts: np.ndarray) -> float:
    chord, _ = cKDTree(pts).query(pts, k=2)
    return float(2.0 * np.arcsin(min(1.0, np.min(chord[:, 1]) / 2.0)))


def _fib_min_angle(J: int) -> float:
    return _min_angle(_fib_points(J))


def sphere_points(d: int, J: int) -> BumpFamily:
    """J equispaced angles (d = 2) or a Fibonacci lattice (d = 3)."""
    J = int(J)
    if J < 4:
        raise ParameterError(f"need J >= 4 sphere points, got {J}")
    if d == 2:
        th = 2.0 * np.pi * np.arange(J) / J
        pts = np.stack([np.cos(th), np.sin(th)], axis=1)
    elif d == 3:
        pts = _fib_points(J)
    else:
        raise UnsupportedError(f"unsupported dimension {d}")
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    frames = np.stack([np.vstack([e, _perp_frame(e)]) for e in pts])
    return BumpFamily(pts, frames, _min_angle(pts), cKDTree(pts))


# ---------------------------------------------------------------- bump family f_b

def _sector_angle(p: DeflationParams) -> float:
    return sector_angle(p.M, p.N2)


def _psi(t):
    return cutoff_profile(t)


def _fb_eval(p: DeflationParams, fam: BumpFamily, t: float, x, v, grad: bool = False):
    x, v = np.broadcast_arrays(np.asarray(x, float), np.asarray(v, float))
    d = p.d
    shape = x.shape[:-1]
    X = x.reshape(-1, d)
    V = v.reshape(-1, d)
    out = np.zeros((X.shape[0], d) if grad else X.shape[0])
    vn = np.sqrt(np.sum(V * V, axis=1))
    act = np.flatnonzero((vn >= 0.8 * p.N2 - 1e-12) & (vn <= 1.3 * p.N2))
    if act.size == 0:
        return out.reshape(shape + ((d,) if grad else ()))
    Va, Xa = V[act], X[act]
    cand, ok = fam.candidates(Va / vn[act, None], _sector_angle(p) + 1e-9)
    for c in range(cand.shape[1]):
        e = fam.points[cand[:, c]]
        vp = np.sum(Va * e, axis=1)
        vperp = np.sqrt(np.maximum(vn[act] ** 2 - vp ** 2, 0.0))
        I = _psi(p.M * vperp) * _psi(10.0 * np.abs(vp - p.N2) / p.N2)
        sel = np.flatnonzero(ok[:, c] & (I > 0))
        if sel.size == 0:
            continue
        y = Xa[sel] - t * Va[sel]
        es = e[sel]
        yp = np.sum(y * es, axis=1)
        yv = y - yp[:, None] * es
        rho = np.sqrt(np.sum(yv * yv, axis=1))
        kp = _psi(p.M * rho)
        ka = _psi(np.abs(yp) / p.N2)
        if not grad:
            out[act[sel]] += p.amp_b * I[sel] * kp * ka
        else:
            safe = np.where(rho > 0, rho, 1.0)
            g = (cutoff_profile_deriv(p.M * rho) * p.M / safe * ka)[:, None] * yv
            g += (kp * cutoff_profile_deriv(np.abs(yp) / p.N2) * np.sign(yp) / p.N2)[:, None] * es
            out[act[sel]] += p.amp_b * I[sel, None] * g
    return out.reshape(shape + ((d,) if grad else ()))


class SectorPlan:
    """Structured quadrature for f_b(t).

    With pairwise disjoint I_j supports, ||f_b(t)(., v)||_{X} = A I_j(v) ||K_j||_X
    for any translation- and rotation-invariant x-norm X, so every mixed norm
    reduces to norms of the single tube K_0 and integrals over one sector.
    """

    shift_invariant = True

    def __init__(self, p: DeflationParams, fam: BumpFamily, n_v: int = 128, n_x: int = 4096):
        self.p, self.fam = p, fam
        self.n_v, self.n_x = (n_v if p.d == 2 else 48), n_x
        self._stats: dict = {}

    def _check(self):
        if self.fam.min_angle <= 2.0 * _sector_angle(self.p):
            raise UnsupportedError("bump supports overlap; the sector plan needs disjoint I_j")

    def sector_nodes(self):
        """Midpoint nodes (a, b) of one sector box, weights, and I there."""
        p, n = self.p, self.n_v
        da = 0.4 * p.N2 / n
        db = 4.0 / p.M / n
        a = 0.8 * p.N2 + (np.arange(n) + 0.5) * da
        b1 = -2.0 / p.M + (np.arange(n) + 0.5) * db
        bs = np.stack(np.meshgrid(*([b1] * (p.d - 1)), indexing="ij"), axis=-1).reshape(-1, p.d - 1)
        A, B = np.repeat(a, len(bs)), np.tile(bs, (n, 1))
        I = _psi(p.M * np.sqrt(np.sum(B * B, axis=1))) * _psi(10.0 * np.abs(A - p.N2) / p.N2)
        keep = I > 0
        pts = np.concatenate([A[keep, None], B[keep]], axis=1)
        return pts, np.full(keep.sum(), da * db ** (p.d - 1)), I[keep]

    def tube_spectra(self):
        """|FT|^2 of the two tube factors on padded periodic boxes, with frequency weights."""
        if "spec" in self._stats:
            return self._stats["spec"]
        p = self.p
        n = self.n_x
        h = 8.0 * p.N2 / n
        s1 = -4.0 * p.N2 + h * np.arange(n)
        S_par = np.abs(h * sfft.fft(_psi(np.abs(s1) / p.N2))) ** 2
        xi_par = 2.0 * np.pi * sfft.fftfreq(n, d=h)
        m = 512 if p.d == 2 else 96
        hp = 8.0 / p.M / m
        y1 = -4.0 / p.M + hp * np.arange(m)
        Y = np.stack(np.meshgrid(*([y1] * (p.d - 1)), indexing="ij"), axis=-1)
        kp = _psi(p.M * np.sqrt(np.sum(Y * Y, axis=-1)))
        S_perp = (np.abs(hp ** (p.d - 1) * sfft.fftn(kp)) ** 2).ravel()
        xi1 = 2.0 * np.pi * sfft.fftfreq(m, d=hp)
        XI = np.stack(np.meshgrid(*([xi1] * (p.d - 1)), indexing="ij"), axis=-1).reshape(-1, p.d - 1)
        dxi_par = 2.0 * np.pi / (n * h)
        dxi_perp = (2.0 * np.pi / (m * hp)) ** (p.d - 1)
        kp_keep = S_par > 1e-22 * S_par.max()
        kq_keep = S_perp > 1e-22 * S_perp.max()
        out = (xi_par[kp_keep] ** 2, S_par[kp_keep] * dxi_par,
               np.sum(XI[kq_keep] ** 2, axis=1), S_perp[kq_keep] * dxi_perp)
        self._stats["spec"] = out
        return out

    def tube_hs(self, s: float) -> float:
        """||K_0||_{H^s}^2 = (2 pi)^-d int <xi>^{2s} |K_0^(xi)|^2 d xi."""
        key = ("hs", s)
        if key not in self._stats:
            xp2, Sp, xq2, Sq = self.tube_spectra()
            tot = 0.0
            for i in range(0, xp2.size, 256):
                w = (1.0 + xp2[i:i + 256, None] + xq2[None, :]) ** s
                tot += np.sum(w * Sp[i:i + 256, None] * Sq[None, :])
            self._stats[key] = tot / (2.0 * np.pi) ** self.p.d
        return self._stats[key]

    def tube_stats(self):
        """(||K_0||_2, ||grad K_0||_2, sup |grad K_0|), from one-dimensional integrals."""
        if "grad" in self._stats:
            return self._stats["grad"]
        p = self.p
        q = p.d - 1
        area = 2.0 if q == 1 else 2.0 * np.pi
        rad = lambda g: area * integrate.quad(lambda r: g(r) * r ** (q - 1), 0.0, 2.0 / p.M,
                                              points=[1.0 / p.M], limit=400)[0]
        lin = lambda g: 2.0 * integrate.quad(g, 0.0, 2.0 * p.N2, points=[p.N2], limit=400)[0]
        kpar2 = lin(lambda s: float(_psi(s / p.N2)) ** 2)
        dkpar2 = lin(lambda s: float(cutoff_profile_deriv(s / p.N2)) ** 2 / p.N2 ** 2)
        kperp2 = rad(lambda r: float(_psi(p.M * r)) ** 2)
        dkperp2 = rad(lambda r: float(cutoff_profile_deriv(p.M * r)) ** 2 * p.M ** 2)
        l2 = np.sqrt(kpar2 * kperp2)
        gl2 = np.sqrt(dkpar2 * kperp2 + kpar2 * dkperp2)
        s = np.linspace(0.0, 2.0 * p.N2, 1601)
        r = np.linspace(0.0, 2.0 / p.M, 1601)
        a, da = _psi(s / p.N2), cutoff_profile_deriv(s / p.N2) / p.N2
        b, db = _psi(p.M * r), cutoff_profile_deriv(p.M * r) * p.M
        sup = np.sqrt(np.max(da[:, None] ** 2 * b[None, :] ** 2 + a[:, None] ** 2 * db[None, :] ** 2))
        self._stats["grad"] = (float(l2), float(gl2), float(sup))
        return self._stats["grad"]

    def sobolev(self, f, s: float, r: float) -> float:
        self._check()
        pts, w, I = self.sector_nodes()
        vint = np.sum(japanese(pts, 2.0 * r) * I * I * w)
        return float(self.p.amp_b * np.sqrt(self.fam.J * self.tube_hs(s) * vint))

    def profile(self, f) -> MixedProfile:
        self._check()
        pts, w, I = self.sector_nodes()
        l2, gl2, gsup = self.tube_stats()
        a = self.p.amp_b * I
        return MixedProfile(self.p.d, pts, self.fam.J * w, a * l2, a * gl2, a, a * gsup)


def fb_support(p: DeflationParams, t: float) -> Box:
    rx = 2.0 * p.N2 + 2.0 / p.M + abs(t) * 1.3 * p.N2
    return Box.symmetric(p.d, rx, 1.3 * p.N2)


def build_fb(p: DeflationParams, fam: BumpFamily, t: float) -> Analytic:
    """f_b(t, x, v) = A sum_j K_j(x - v t) I_j(v), evaluated sector by sector."""
    if t > 0:
        raise ParameterError(f"f_b is built for t <= 0, got t={t}")
    t = float(t)
    return Analytic(lambda x, v: _fb_eval(p, fam, t, x, v),
                    fb_support(p, t),
                    grad_x=lambda x, v: _fb_eval(p, fam, t, x, v, grad=True),
                    plan=SectorPlan(p, fam))


# ---------------------------------------------------------------- damping integral

class BetaEngine:
    """Quadrature for the loss rate lambda(t, x, v) = ||b|| int f_b(t, x, u) |u - v|^gamma du
    and for beta(t, x, v) = int_0^t lambda dt0.

    u runs over a midpoint product rule on every sector box; t0 over a
    trapezoid rule with j_schedule nodes.  For |x| + 1.2 |t| N2 <= N2 the
    along-tube factor of K_j is identically 1 at every node, the node sum
    separates, and beta becomes one matrix product.  Intermediate sums are
    memoized on the query nodes.
    """

    def __init__(self, p: DeflationParams, fam: BumpFamily, cache: int = 16):
        self.p, self.fam = p, fam
        n = p.u_nodes
        da = 0.4 * p.N2 / n
        db = 4.0 / p.M / n
        self.a = 0.8 * p.N2 + (np.arange(n) + 0.5) * da
        b1 = -2.0 / p.M + (np.arange(n) + 0.5) * db
        self.b = np.stack(np.meshgrid(*([b1] * (p.d - 1)), indexing="ij"), axis=-1).reshape(-1, p.d - 1)
        bn = np.sqrt(np.sum(self.b ** 2, axis=1))
        self.W = (da * db ** (p.d - 1)) * (_psi(10.0 * np.abs(self.a - p.N2) / p.N2)[:, None]
                                            * _psi(p.M * bn)[None, :])
        self.h_u = min(da, db)
        E = fam.frames[:, 0, :]
        F = fam.frames[:, 1:, :]
        # u[j, a, b] = a e_j + F_j^T b
        self.u = (self.a[None, :, None, None] * E[:, None, None, :]
                  + np.einsum("bk,jkd->jbd", self.b, F)[:, None, :, :])
        self.scale = p.b_norm * p.amp_b
        self.kernel = p.kernel
        self._cache: dict = {}
        self._cache_size = cache

    # -- memo
    def _memo(self, key, fn):
        if key in self._cache:
            return self._cache[key]
        if len(self._cache) >= self._cache_size:
            self._cache.pop(next(iter(self._cache)))
        val = self._cache[key] = fn()
        return val

    def time_nodes(self, t: float):
        n = self.p.j_schedule
        tn = t * np.arange(n) / (n - 1)
        w = np.full(n, abs(t) / (n - 1))
        w[[0, -1]] *= 0.5
        return tn, w

    def _weight(self, r: np.ndarray) -> np.ndarray:
        k = self.kernel
        cut = r < k.cutoff_eps * self.h_u
        with np.errstate(divide="ignore"):
            out = np.where(cut, 0.0, np.abs(r) ** k.gamma) if k.gamma != 0 else np.ones_like(r)
        return out

    def H(self, V: np.ndarray, collapse: bool) -> np.ndarray:
        """sum_a W |u - v|^gamma -> (J, n_b, n_v), or (J, n_a, n_b, n_v) without collapsing a."""
        def build():
            J = self.fam.J
            shape = (J, self.b.shape[0], V.shape[0]) if collapse else \
                (J, self.a.size, self.b.shape[0], V.shape[0])
            out = np.empty(shape)
            step = max(1, int(2e6 // max(1, self.a.size * self.b.shape[0] * V.shape[0])))
            for j0 in range(0, J, step):
                du = self.u[j0:j0 + step, :, :, None, :] - V[None, None, None, :, :]
                val = self.W[None, :, :, None] * self._weight(np.sqrt(np.sum(du * du, axis=-1)))
                out[j0:j0 + step] = val.sum(axis=1) if collapse else val
            return out
        return self._memo(("H", collapse, V.tobytes()), build)

    def P(self, X: np.ndarray, tn: np.ndarray, tw: np.ndarray, grad: bool = False):
        """Fast path: sum_i w_i psi(M |F_j x - t_i b|) -> (n_x, J, n_b) (and its x-gradient)."""
        def build():
            p, F = self.p, self.fam.frames[:, 1:, :]
            nb, J = self.b.shape[0], self.fam.J
            val = np.zeros((X.shape[0], J, nb))
            gval = np.zeros((X.shape[0], p.d, J, nb)) if grad else None
            step = max(1, int(4e6 // (J * nb * tn.size)))
            for i0 in range(0, X.shape[0], step):
                y = np.einsum("xd,jkd->xjk", X[i0:i0 + step], F)          # (x, J, d-1)
                z = y[:, :, None, None, :] - tn[None, None, :, None, None] * self.b[None, None, None, :, :]
                rho = np.sqrt(np.sum(z * z, axis=-1))                      # (x, J, t, b)
                val[i0:i0 + step] = np.einsum("t,xjtb->xjb", tw, _psi(p.M * rho))
                if grad:
                    safe = np.where(rho > 0, rho, 1.0)
                    c = cutoff_profile_deriv(p.M * rho) * p.M / safe
                    gp = np.einsum("t,xjtb,xjtbk->xjbk", tw, c, z)
                    gval[i0:i0 + step] = np.einsum("xjbk,jkd->xdjb", gp, F)
            return val, gval
        return self._memo(("P", grad, tn.tobytes(), tw.tobytes(), X.tobytes()), build)

    def P_general(self, X: np.ndarray, tn: np.ndarray, tw: np.ndarray) -> np.ndarray:
        """sum_i w_i K_j(x - t_i u) over the full node set -> (n_x, J, n_a, n_b)."""
        p = self.p
        E, F = self.fam.frames[:, 0, :], self.fam.frames[:, 1:, :]
        out = np.zeros((X.shape[0], self.fam.J, self.a.size, self.b.shape[0]))
        for i, xi in enumerate(X):
            y = F @ xi                                       # (J, d-1)
            ya = E @ xi                                      # (J,)
            for t, w in zip(tn, tw):
                z = y[:, None, :] - t * self.b[None, :, :]
                kp = _psi(p.M * np.sqrt(np.sum(z * z, axis=-1)))       # (J, b)
                ka = _psi(np.abs(ya[:, None] - t * self.a[None, :]) / p.N2)  # (J, a)
                out[i] += w * ka[:, :, None] * kp[:, None, :]
        return out

    def fast_rows(self, X: np.ndarray, t: float) -> np.ndarray:
        return np.sqrt(np.sum(X * X, axis=1)) + 1.2 * abs(t) * self.p.N2 <= self.p.N2

    def integral(self, X: np.ndarray, V: np.ndarray, tn: np.ndarray, tw: np.ndarray,
                 grad: bool = False):
        """sum_i w_i lambda(t_i, x, v) on the product set X x V (and its x-gradient)."""
        span = float(np.max(np.abs(tn))) if tn.size else 0.0
        out = np.zeros((X.shape[0], V.shape[0]))
        gout = np.zeros((X.shape[0], self.p.d, V.shape[0])) if grad else None
        fast = self.fast_rows(X, span)
        if np.any(fast):
            Xf = X[fast]
            val, gval = self.P(Xf, tn, tw, grad)
            Hc = self.H(V, True).reshape(-1, V.shape[0])
            out[fast] = val.reshape(Xf.shape[0], -1) @ Hc
            if grad:
                gout[fast] = (gval.reshape(Xf.shape[0] * self.p.d, -1) @ Hc).reshape(
                    Xf.shape[0], self.p.d, -1)
        if np.any(~fast):
            if grad:
                raise UnsupportedError("x-gradient of beta is available on the core region only")
            Xg = X[~fast]
            Pg = self.P_general(Xg, tn, tw).reshape(Xg.shape[0], -1)
            out[~fast] = Pg @ self.H(V, False).reshape(-1, V.shape[0])
        out *= self.scale
        if grad:
            gout *= self.scale
        return out, gout

    def beta_matrix(self, t: float, X: np.ndarray, V: np.ndarray, grad: bool = False):
        if t == 0.0:
            z = np.zeros((X.shape[0], V.shape[0]))
            return z, (np.zeros((X.shape[0], self.p.d, V.shape[0])) if grad else None)
        tn, tw = self.time_nodes(t)
        val, g = self.integral(X, V, tn, tw, grad)
        return -val, (-g if grad else None)

    def rate_matrix(self, t: float, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        return self.integral(X, V, np.array([float(t)]), np.ones(1))[0]

    def pointwise(self, fn, x, v, extra_shape=()):
        """Evaluate a product-set routine fn(X, V) at broadcast point pairs."""
        x, v = np.broadcast_arrays(np.asarray(x, float), np.asarray(v, float))
        d = self.p.d
        shape = x.shape[:-1]
        X = x.reshape(-1, d)
        V = v.reshape(-1, d)
        out = np.zeros((X.shape[0],) + extra_shape)
        step = 8192
        for s in range(0, X.shape[0], step):
            ux, ix = np.unique(X[s:s + step], axis=0, return_inverse=True)
            uv, iv = np.unique(V[s:s + step], axis=0, return_inverse=True)
            mat = fn(ux, uv)
            if extra_shape:
                out[s:s + step] = mat[ix.ravel(), :, iv.ravel()]
            else:
                out[s:s + step] = mat[ix.ravel(), iv.ravel()]
        return out.reshape(shape + extra_shape)


_ENGINES: dict = {}


def beta_engine(p: DeflationParams, fam: BumpFamily) -> BetaEngine:
    key = (p, fam.points.tobytes())
    eng = _ENGINES.get(key)
    if eng is None:
        if len(_ENGINES) >= 4:
            _ENGINES.pop(next(iter(_ENGINES)))
        eng = _ENGINES[key] = BetaEngine(p, fam)
    return eng


def beta(p: DeflationParams, fam: BumpFamily, t: float, x, v) -> np.ndarray:
    """beta(t, x, v) = int_0^t int f_b(t0, x, u) B-rate du dt0 (<= 0 for t <= 0)."""
    if not (p.T_star - 1e-12 <= t <= 0.0):
        raise ParameterError(f"beta needs T_star <= t <= 0, got t={t}")
    eng = beta_engine(p, fam)
    return eng.pointwise(lambda X, V: eng.beta_matrix(float(t), X, V)[0], x, v)


def loss_rate(p: DeflationParams, fam: BumpFamily, t: float, x, v) -> np.ndarray:
    """lambda(t, x, v) = ||b||_1 int f_b(t, x, u) |u - v|^gamma du, so that Q-(f, f_b) = f lambda."""
    eng = beta_engine(p, fam)
    return eng.pointwise(lambda X, V: eng.rate_matrix(float(t), X, V), x, v)


# ---------------------------------------------------------------- core f_r

def fr_plan(p: DeflationParams, n_x: int = 32, n_v: int = 16) -> Grid:
    return Grid(p.d, 2.5 / p.M, n_x, 3.0 / p.N1, n_v)


def build_fr(p: DeflationParams, fam: BumpFamily, t: float) -> Analytic:
    """f_r = M^(d/2-s) N1^(d/2) exp(-beta) chi(M x) chi(N1 v)."""
    if not (p.T_star - 1e-12 <= t <= 0.0):
        raise ParameterError(f"f_r is built for T_star <= t <= 0, got t={t}")
    t = float(t)
    eng = beta_engine(p, fam)

    def evaluate(x, v):
        def mat(X, V):
            cx = _psi(p.M * np.sqrt(np.sum(X * X, axis=1)))
            cv = _psi(p.N1 * np.sqrt(np.sum(V * V, axis=1)))
            out = np.zeros((X.shape[0], V.shape[0]))
            ix, iv = np.flatnonzero(cx > 0), np.flatnonzero(cv > 0)
            if ix.size and iv.size:
                b, _ = eng.beta_matrix(t, X[ix], V[iv])
                out[np.ix_(ix, iv)] = p.amp_r * np.exp(-b) * cx[ix, None] * cv[None, iv]
            return out
        return eng.pointwise(mat, x, v)

    def grad(x, v):
        def mat(X, V):
            r = np.sqrt(np.sum(X * X, axis=1))
            cx = _psi(p.M * r)
            dcx = cutoff_profile_deriv(p.M * r) * p.M
            cv = _psi(p.N1 * np.sqrt(np.sum(V * V, axis=1)))
            out = np.zeros((X.shape[0], p.d, V.shape[0]))
            ix, iv = np.flatnonzero(cx > 0), np.flatnonzero(cv > 0)
            if ix.size and iv.size:
                b, gb = eng.beta_matrix(t, X[ix], V[iv], grad=True)
                xh = X[ix] / np.where(r[ix] > 0, r[ix], 1.0)[:, None]
                e = p.amp_r * np.exp(-b) * cv[None, iv]                     # (x, v)
                g = (dcx[ix, None] * xh)[:, :, None] - cx[ix, None, None] * gb
                out[ix[:, None], :, iv[None, :]] = np.transpose(e[:, None, :] * g, (0, 2, 1))
            return out
        return eng.pointwise(mat, x, v, extra_shape=(p.d,))

    return Analytic(evaluate, Box.symmetric(p.d, 2.0 / p.M, 2.0 / p.N1), grad_x=grad,
                    plan=GridPlan(fr_plan(p)))


def build_fa(p: DeflationParams, fam: BumpFamily, t: float) -> Analytic:
    """f_a = f_r + f_b; the two velocity supports are disjoint by construction."""
    if not 2.0 / p.N1 < 0.8 * p.N2:
        raise ParameterError("velocity supports of f_r and f_b overlap")
    fr, fb = build_fr(p, fam, t), build_fb(p, fam, t)
    return Analytic(lambda x, v: fr.evaluate(x, v) + fb.evaluate(x, v),
                    fr.support.union(fb.support),
                    grad_x=lambda x, v: _masked_grad(fr, x, v) + _masked_grad(fb, x, v),
                    plan=SumPlan([(fr, fr.plan), (fb, fb.plan)]))


def _masked_grad(f: Analytic, x, v):
    x, v = np.broadcast_arrays(np.asarray(x, float), np.asarray(v, float))
    return f.grad_x(x, v) * f.support.contains(x, v)[..., None]


# ---------------------------------------------------------------- error term

def _pow2_at_least(n: float) -> int:
    return int(2 ** max(3, int(np.ceil(np.log2(max(n, 1.0))))))


def required_grid(p: DeflationParams, t: float) -> Grid:
    """Smallest grid covering supp f_r + supp f_b at time t with h_x <= 1/M and h_v <= 1/N1."""
    box = fb_support(p, t)
    L_x = float(np.max(box.x_hi)) * 1.05
    L_v = 1.3 * p.N2 * 1.05
    return Grid(p.d, L_x, _pow2_at_least(2.0 * L_x * p.M), L_v, _pow2_at_least(2.0 * L_v * p.N1))


def check_resolution(p: DeflationParams, grid: Grid) -> None:
    """Dense error terms need the tube width 1/M in x and the core width 1/N1 in v resolved."""
    if grid.h_x <= 1.0 / p.M + 1e-12 and grid.h_v <= 1.0 / p.N1 + 1e-12:
        return
    need = required_grid(p, p.T_star)
    nodes = float(need.n_x) ** p.d * float(need.n_v) ** p.d
    raise ResolutionError(
        f"grid spacing h_x={grid.h_x:.4g}, h_v={grid.h_v:.4g} does not resolve 1/M={1.0 / p.M:.4g} "
        f"and 1/N1={1.0 / p.N1:.4g}; a covering grid needs n_x={need.n_x}, n_v={need.n_v} "
        f"({nodes:.3g} nodes, {8.0 * nodes / 2 ** 30:.3g} GiB per field)")


def _check_cover(p: DeflationParams, t: float, grid: Grid) -> None:
    box = fb_support(p, t)
    xs_hi = grid.L_x - grid.h_x
    if np.any(box.x_lo < -grid.L_x - 1e-12) or np.any(box.x_hi > xs_hi + 1e-12) \
            or 1.3 * p.N2 > grid.L_v - grid.h_v + 1e-12:
        raise GridError(
            f"grid [-{grid.L_x}, {xs_hi}]^d x [-{grid.L_v}, {grid.L_v - grid.h_v}]^d does not cover "
            f"the supports (|x| <= {float(np.max(box.x_hi)):.4g}, |v| <= {1.3 * p.N2:.4g})")


def _vdotgrad(f: Dense) -> np.ndarray:
    g = f.grid
    G = grad_x(f)
    v = g.v_points().reshape((1,) * g.d + (g.n_v,) * g.d + (g.d,))
    return np.sum(G * v, axis=-1)


def assemble_f_err(p: DeflationParams, fam: BumpFamily, t: float, grid: Grid, terms: dict | None = None,
                   zero_fr: bool = False, sq=None, resolution: bool = True) -> Dense:
    """F_err = v.grad f_r - Q+(f_r, f_b) - Q(f_b, f_r) - Q(f_r, f_r) - Q(f_b, f_b) on a Dense grid.

    Q = Q+ - Q-, direct quadrature; v.grad f_r by spectral differentiation of
    the sampled core.  ``terms`` (if given) receives each summand by name.
    ``zero_fr`` replaces f_r by 0, leaving -Q(f_b, f_b).
    """
    if resolution:
        check_resolution(p, grid)
    _check_cover(p, t, grid)
    k = p.kernel
    fb = build_fb(p, fam, t).sample(grid)
    fr = Dense.zeros(grid) if zero_fr else build_fr(p, fam, t).sample(grid)
    G = lambda a, b: q_gain_direct(a, b, k, grid, sq).values
    L = lambda a, b: q_loss_direct(a, b, k, grid, sq).values
    parts = {
        "transport_fr": _vdotgrad(fr),
        "gain_fr_fb": -G(fr, fb),
        "gain_fb_fr": -G(fb, fr),
        "loss_fb_fr": L(fb, fr),
        "gain_fr_fr": -G(fr, fr),
        "loss_fr_fr": L(fr, fr),
        "gain_fb_fb": -G(fb, fb),
        "loss_fb_fb": L(fb, fb),
    }
    if terms is not None:
        terms.update({name: Dense(grid, val) for name, val in parts.items()})
    return Dense(grid, sum(parts.values()))


def f_err_from_equation(p: DeflationParams, fam: BumpFamily, t: float, grid: Grid, dt: float = 1e-4,
                        sq=None, analytic_grad_fb: bool = True, resolution: bool = True) -> Dense:
    """F_err = d_t f_a + v.grad f_a + Q-(f_a, f_a) - Q+(f_a, f_a), with d_t by finite differences.

    Centered second-order differences, or a one-sided second-order stencil
    at the ends of [T_star, 0].  v.grad f_r is spectral; v.grad f_b
    uses the closed-form gradient unless ``analytic_grad_fb`` is False.
    """
    if resolution:
        check_resolution(p, grid)
    _check_cover(p, t, grid)
    k = p.kernel
    fa = lambda s: build_fa(p, fam, s).sample(grid).values
    if t + dt <= 0.0 and t - dt >= p.T_star - 1e-12:
        dfa = (fa(t + dt) - fa(t - dt)) / (2.0 * dt)
    elif t + dt > 0.0:
        dfa = (3.0 * fa(t) - 4.0 * fa(t - dt) + fa(t - 2.0 * dt)) / (2.0 * dt)
    else:
        dfa = (-3.0 * fa(t) + 4.0 * fa(t + dt) - fa(t + 2.0 * dt)) / (2.0 * dt)
    fr = build_fr(p, fam, t).sample(grid)
    fbA = build_fb(p, fam, t)
    fb = fbA.sample(grid)
    if analytic_grad_fb:
        xs = grid.x_points()[:, None, :]
        vs = grid.v_points()[None, :, :]
        gb = fbA.grad_x(xs, vs) * fbA.support.contains(xs, vs)[..., None]
        tb = np.sum(gb * vs, axis=-1).reshape(grid.shape)
    else:
        tb = _vdotgrad(fb)
    fa_d = fr + fb
    Q = q_gain_direct(fa_d, fa_d, k, grid, sq).values - q_loss_direct(fa_d, fa_d, k, grid, sq).values
    return Dense(grid, dfa + _vdotgrad(fr) + tb - Q)


# ---------------------------------------------------------------- experiment

@dataclass
class DeflationReport:
    times: np.ndarray
    norm_fa: np.ndarray
    norm_fr: np.ndarray
    norm_fb: np.ndarray
    params: dict
    norm: dict

    @property
    def ratio(self) -> float:
        """||f_a(T_star)|| / ||f_a(0)||."""
        return float(self.norm_fa[0] / self.norm_fa[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "norm_fa", "norm_fr", "norm_fb"])
        for row in zip(self.times, self.norm_fa, self.norm_fr, self.norm_fb):
            w.writerow([format(float(a), ".17g") for a in row])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"ratio": self.ratio, "params": self.params, "norm": self.norm}

    def to_json(self) -> str:
        return dumps(self.summary())


def _component_norm(f: Analytic, norm: NormSpec, p: DeflationParams) -> float:
    if norm.kind == "sobolev":
        return sobolev_norm(f, norm.s, norm.r)
    if norm.kind == "z":
        return z_norm(f, norm.M, norm.N2, norm.gamma, norm.r0)
    raise UnsupportedError("the deflation table supports Sobolev and Z norms")


def deflation_experiment(p: DeflationParams, fam: BumpFamily, norm: NormSpec | None = None,
                         n_times: int = 5) -> DeflationReport:
    """Norms of f_a, f_r, f_b at n_times points of [T_star, 0]."""
    norm = norm or NormSpec.from_deflation(p.s0, p.gamma)
    if n_times < 2:
        raise ParameterError("n_times must be >= 2")
    times = np.linspace(p.T_star, 0.0, n_times)
    fa, fr, fb = [], [], []
    for t in times:
        a = build_fa(p, fam, t)
        r_part, b_part = a.plan.parts[0][0], a.plan.parts[1][0]
        fr.append(_component_norm(r_part, norm, p))
        fb.append(_component_norm(b_part, norm, p))
        fa.append(_component_norm(a, norm, p))
    return DeflationReport(times, np.array(fa), np.array(fr), np.array(fb), p.to_dict(), asdict(norm))
