"""
Cutoff Boltzmann collision operator Q = Q+ - Q- for soft potentials.

Direct forms are plain weighted sums over velocity nodes u and sphere nodes
omega, with the post-collisional velocities

    v* = v + ((u - v).omega) omega,   u* = u - ((u - v).omega) omega

read off the grid by multilinear interpolation.  The spectral forms follow
the Bobylev representation and integrate the |eta|^{-(d+gamma)} weight with a
Gauss-Jacobi radial rule.  The position x is a passive parameter throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import gamma as gamma_fn
from typing import Callable

import numba
import numpy as np
from scipy import fft as sfft
from scipy import integrate, ndimage, signal, special

from .errors import (
    GridMismatchError,
    ResolutionError,
    SingularityError,
    UnsupportedError,
    ValidationError,
)
from .field import Analytic, Dense, Grid, PhaseField

ANGULAR = {
    "abs_cos": np.abs,
    "one": np.ones_like,
    "cos2": np.square,
}


def sphere_area(d: int) -> float:
    return 2.0 * np.pi ** (d / 2) / gamma_fn(d / 2)


@dataclass(frozen=True)
class CollisionKernel:
    """B(u - v, omega) = |u - v|^gamma b(cos theta), or the composite variant.

    ``angular`` is a key of ``ANGULAR`` or a callable on cos(theta) in [-1, 1].
    ``cutoff_eps`` is the radius, in units of h_v, inside which the kernel is
    zeroed on a grid.  ``self_cell`` puts the exact integral of the kernel over
    the zeroed diagonal cell back into the direct forms (off by default).
    """

    gamma: float = -0.5
    angular: str | Callable = "abs_cos"
    variant: str = "power_law"
    cutoff_eps: float = 0.5
    self_cell: bool = False

    def __post_init__(self):
        if self.variant not in ("power_law", "composite"):
            raise ValidationError(f"unknown kernel variant {self.variant!r}")
        if isinstance(self.angular, str) and self.angular not in ANGULAR:
            raise ValidationError(f"unknown angular factor {self.angular!r}")
        if not (self.cutoff_eps >= 0):
            raise ValidationError("cutoff_eps must be >= 0")
        c = np.linspace(-1.0, 1.0, 401)
        if np.any(self.b(c) < 0):
            raise ValidationError("angular factor must be nonnegative")

    def b(self, c) -> np.ndarray:
        fn = ANGULAR[self.angular] if isinstance(self.angular, str) else self.angular
        return np.asarray(fn(np.asarray(c, float)), float)

    def radial(self, r) -> np.ndarray:
        r = np.asarray(r, float)
        if self.variant == "composite":
            with np.errstate(divide="ignore"):
                return np.where(r <= 1.0, r, 1.0 / np.where(r > 0, r, 1.0))
        if self.gamma == 0:
            return np.ones_like(r)
        with np.errstate(divide="ignore"):
            return np.where(r > 0, np.abs(r) ** self.gamma, np.inf)

    def validate(self, d: int) -> None:
        """Check the admissible gamma range and variant for dimension d."""
        if self.variant == "composite":
            if d != 3:
                raise ValidationError("composite kernel is defined for d=3 only")
            return
        lo = -(d - 1) / 2
        if not (lo <= self.gamma <= 0):
            raise ValidationError(
                f"gamma={self.gamma} violates -(d-1)/2 <= gamma <= 0 (d={d}: {lo} <= gamma <= 0)")

    def grad_constant(self, samples: int = 2001) -> float:
        """Smallest sampled C with b(c) <= C|c|; inf when b(0) > 0."""
        c = np.linspace(-1.0, 1.0, samples)
        bc = self.b(c)
        nz = c != 0
        if np.any(bc[~nz] > 0):
            return float("inf")
        return float(np.max(bc[nz] / np.abs(c[nz])))

    def b_l1(self, d: int) -> float:
        """||b||_{L^1(S^{d-1})} = int b(e.omega) d omega."""
        if d == 2:
            val, _ = integrate.quad(lambda th: float(self.b(np.cos(th))), 0.0, 2 * np.pi,
                                    points=[np.pi / 2, np.pi, 3 * np.pi / 2], limit=200)
            return val
        val, _ = integrate.quad(lambda z: float(self.b(z)), -1.0, 1.0, points=[0.0], limit=200)
        return 2.0 * np.pi * val

    def b_sigma(self, s, d: int) -> np.ndarray:
        """Angular factor of the same operator written with sigma = 2(w.omega)omega - w.

        Both hemispheres of omega map onto the sphere of sigma; the Jacobian
        is 2^{d-1} c^{d-2} with c = cos(theta) = sqrt((1 + s)/2).
        """
        c = np.sqrt(np.clip((1.0 + np.asarray(s, float)) / 2.0, 0.0, 1.0))
        if d == 2:
            return self.b(c)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(c > 0, self.b(c) / (2.0 * c) ** (d - 2), self.b(c) * np.inf)

    def to_dict(self) -> dict:
        ang = self.angular if isinstance(self.angular, str) else "custom"
        return {"gamma": self.gamma, "b": ang, "variant": self.variant,
                "cutoff_eps": self.cutoff_eps, "self_cell": self.self_cell}

    @classmethod
    def from_dict(cls, cfg: dict) -> "CollisionKernel":
        return cls(gamma=float(cfg.get("gamma", -0.5)), angular=cfg.get("b", "abs_cos"),
                   variant=cfg.get("variant", "power_law"),
                   cutoff_eps=float(cfg.get("cutoff_eps", 0.5)),
                   self_cell=bool(cfg.get("self_cell", False)))


def kernel_eval(kernel: CollisionKernel, u, v, omega, h_v: float | None = None):
    """B(u - v, omega); zero inside the regularized diagonal |u - v| < eps*h_v."""
    w = np.asarray(u, float) - np.asarray(v, float)
    omega = np.asarray(omega, float)
    r = np.sqrt(np.sum(w * w, axis=-1))
    singular = kernel.variant == "power_law" and kernel.gamma < 0
    if kernel.cutoff_eps == 0 and singular and np.any(r == 0):
        raise SingularityError("u = v with cutoff_eps = 0")
    rad_cut = kernel.cutoff_eps * (h_v if h_v is not None else 0.0)
    safe = np.where(r > 0, r, 1.0)
    cos = np.sum(w * omega, axis=-1) / safe
    val = kernel.radial(safe) * kernel.b(np.where(r > 0, cos, 0.0))
    cut = (r < rad_cut) | (r == 0)
    out = np.where(cut, 0.0 if singular or rad_cut > 0 else val, val)
    return out[()] if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SphereQuadrature:
    nodes: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def d(self) -> int:
        return self.nodes.shape[1]

    def folded(self) -> "SphereQuadrature":
        """Merge antipodal node pairs (the gain and loss integrands are even in omega)."""
        n = self.nodes
        used = np.zeros(len(n), bool)
        keep, wts = [], []
        for i in range(len(n)):
            if used[i]:
                continue
            dist = np.sum((n + n[i]) ** 2, axis=1)
            j = int(np.argmin(dist))
            used[i] = True
            if dist[j] < 1e-20 and not used[j] and j != i:
                used[j] = True
                keep.append(i)
                wts.append(self.weights[i] + self.weights[j])
            else:
                keep.append(i)
                wts.append(self.weights[i])
        return SphereQuadrature(n[keep], np.asarray(wts), self.order)


def sphere_quadrature(d: int, order: int) -> SphereQuadrature:
    """Uniform circle rule (d=2) or Gauss-Legendre x uniform azimuth (d=3).

    d=2 uses ``order`` equispaced angles.  d=3 integrates spherical
    polynomials of degree <= ``order`` exactly.
    """
    if order < 4:
        raise ValidationError("sphere quadrature order must be >= 4")
    if d == 2:
        th = 2.0 * np.pi * np.arange(order) / order
        nodes = np.stack([np.cos(th), np.sin(th)], axis=1)
        return SphereQuadrature(nodes, np.full(order, 2.0 * np.pi / order), order)
    if d == 3:
        nz = (order + 2) // 2
        nphi = 2 * nz
        z, wz = special.roots_legendre(nz)
        phi = 2.0 * np.pi * np.arange(nphi) / nphi
        Z, P = np.meshgrid(z, phi, indexing="ij")
        s = np.sqrt(1.0 - Z ** 2)
        nodes = np.stack([s * np.cos(P), s * np.sin(P), Z], axis=-1).reshape(-1, 3)
        weights = (wz[:, None] * np.full(nphi, 2.0 * np.pi / nphi)[None, :]).ravel()
        return SphereQuadrature(nodes, weights, order)
    raise UnsupportedError(f"unsupported dimension {d}")


def default_sphere(d: int) -> SphereQuadrature:
    return sphere_quadrature(d, 16 if d == 2 else 8)


# ---------------------------------------------------------------- helpers

def _as_dense(f: PhaseField, grid: Grid) -> Dense:
    if isinstance(f, Dense):
        if f.grid != grid:
            raise GridMismatchError("field grid differs from the operator grid")
        return f
    if isinstance(f, Analytic):
        return f.sample(grid)
    raise GridMismatchError("unsupported field type")


def _active_rows(F: np.ndarray, G: np.ndarray):
    """Rows (x-nodes) where both factors are nonzero, deduplicated.

    Returns (rows, uniq_index, inverse) so that unique pair k is
    (F[rows[uniq_index[k]]], G[rows[uniq_index[k]]]).
    """
    rows = np.flatnonzero(np.any(F != 0, axis=1) & np.any(G != 0, axis=1))
    if rows.size == 0:
        return rows, rows, rows
    pair = np.concatenate([F[rows], G[rows]], axis=1)
    _, first, inv = np.unique(pair, axis=0, return_index=True, return_inverse=True)
    return rows, first, inv.ravel()


def _offsets(n: int, d: int) -> np.ndarray:
    m = np.arange(-(n - 1), n)
    mesh = np.meshgrid(*([m] * d), indexing="ij")
    return np.stack([a.ravel() for a in mesh], axis=-1)


def _radial_weights(kernel: CollisionKernel, grid: Grid, offs: np.ndarray):
    """|w| and the regularized radial factor on lattice offsets."""
    h = grid.h_v
    w = offs * h
    r = np.sqrt(np.sum(w * w, axis=1))
    cut = r < max(kernel.cutoff_eps * h, 0.0)
    singular = kernel.variant == "power_law" and kernel.gamma < 0
    if singular and kernel.cutoff_eps == 0:
        raise SingularityError("diagonal u = v lies on the grid with cutoff_eps = 0")
    rad = np.zeros_like(r)
    ok = (r > 0) & ~cut
    rad[ok] = kernel.radial(r[ok])
    if not singular and kernel.cutoff_eps == 0:
        rad[r == 0] = kernel.radial(np.array([0.0]))[0]
    return w, r, rad


@lru_cache(maxsize=64)
def _cell_weight(kernel: CollisionKernel, d: int, h: float) -> float:
    """||b||_1 int_{[-h/2, h/2]^d} radial(|w|) dw when the diagonal node is zeroed, else 0."""
    singular = kernel.variant == "power_law" and kernel.gamma < 0
    if not (kernel.self_cell and (singular or kernel.cutoff_eps > 0)):
        return 0.0
    rad = lambda *w: float(kernel.radial(np.sqrt(sum(c * c for c in w))))
    # the integrand is even in each coordinate: integrate one orthant
    val, _ = integrate.nquad(rad, [(0.0, h / 2)] * d, opts={"limit": 200})
    return 2.0 ** d * val * kernel.b_l1(d)


def _add_self_cell(out: np.ndarray, F: np.ndarray, G: np.ndarray, rows: np.ndarray,
                   kernel: CollisionKernel, grid: Grid) -> None:
    # u = v gives v* = v and u* = u, so gain and loss pick up the same f(v) g(v) term
    c = _cell_weight(kernel, grid.d, grid.h_v)
    if c:
        out[rows] += c * F[rows] * G[rows]


# ---------------------------------------------------------------- loss

def _loss_weights(kernel: CollisionKernel, grid: Grid, sq: SphereQuadrature) -> np.ndarray:
    """W(m) = radial(|w|) * sum_omega b(w_hat.omega) w_omega * h^d on offsets m."""
    d, n = grid.d, grid.n_v
    offs = _offsets(n, d)
    w, r, rad = _radial_weights(kernel, grid, offs)
    safe = np.where(r > 0, r, 1.0)[:, None]
    cos = (w / safe) @ sq.nodes.T
    ang = kernel.b(cos) @ sq.weights
    return (rad * ang * grid.h_v ** d).reshape((2 * n - 1,) * d)


def _partner_integral(G: np.ndarray, W: np.ndarray, grid: Grid) -> np.ndarray:
    """S(v) = sum_u G(u) W(u - v) for each row of G (rows are x-nodes)."""
    d, n = grid.d, grid.n_v
    Gs = G.reshape((-1,) + (n,) * d)
    Wf = W[(slice(None, None, -1),) * d]
    full = signal.fftconvolve(Gs, Wf[None], mode="full", axes=tuple(range(1, d + 1)))
    sl = (slice(None),) + (slice(n - 1, 2 * n - 1),) * d
    return full[sl].reshape(G.shape)


def q_loss_direct(f: PhaseField, g: PhaseField, kernel: CollisionKernel, grid: Grid,
                  sq: SphereQuadrature | None = None) -> Dense:
    """Q-(f, g)(x, v) = f(x, v) sum_u sum_omega g(x, u) B(u - v, omega) h_v^d w_omega."""
    kernel.validate(grid.d)
    sq = sq or default_sphere(grid.d)
    F = _as_dense(f, grid).flat()
    G = _as_dense(g, grid).flat()
    out = np.zeros_like(F)
    rows, first, inv = _active_rows(F, G)
    if rows.size:
        W = _loss_weights(kernel, grid, sq)
        S = _partner_integral(G[rows[first]], W, grid)
        out[rows] = F[rows] * S[inv]
        _add_self_cell(out, F, G, rows, kernel, grid)
    return Dense(grid, out)


# ---------------------------------------------------------------- gain (direct)

_TABLES: dict = {}


def _gain_table(kernel: CollisionKernel, grid: Grid, sq: SphereQuadrature):
    """Cached per (kernel, velocity lattice, sphere rule)."""
    key = (kernel, grid.d, grid.n_v, grid.L_v, sq.nodes.tobytes(), sq.weights.tobytes())
    tab = _TABLES.get(key)
    if tab is None:
        if len(_TABLES) >= 8:
            _TABLES.pop(next(iter(_TABLES)))
        tab = _TABLES[key] = _build_gain_table(kernel, grid, sq)
    return tab


def _build_gain_table(kernel: CollisionKernel, grid: Grid, sq: SphereQuadrature):
    """Per (offset m, omega) entry: interpolation stencils of v* - v and u* - v, weight."""
    d, n, h = grid.d, grid.n_v, grid.h_v
    fq = sq.folded()
    offs = _offsets(n, d)
    w, r, rad = _radial_weights(kernel, grid, offs)
    keep = rad > 0
    offs, w, r, rad = offs[keep], w[keep], r[keep], rad[keep]
    proj = w @ fq.nodes.T                      # (n_off, n_omega)
    cos = proj / r[:, None]
    K = rad[:, None] * kernel.b(cos) * fq.weights[None, :] * h ** d
    a = proj[:, :, None] * fq.nodes[None, :, :]   # v* - v
    bvec = w[:, None, :] - a                       # u* - v
    sel = K != 0
    m = np.broadcast_to(offs[:, None, :], a.shape)[sel]
    pa = a[sel] / h
    pb = bvec[sel] / h
    base_a = np.floor(pa)
    base_b = np.floor(pb)
    return (m.astype(np.int64), base_a.astype(np.int64), pa - base_a,
            base_b.astype(np.int64), pb - base_b, K[sel])


_TOL = 1e-9


@numba.njit(cache=True, inline="always")
def _stencil(i, base, frac, n):
    p = i + base
    pos = p + frac
    valid = (pos >= -_TOL) and (pos <= n - 1 + _TOL)
    w0 = 1.0 - frac
    w1 = frac
    i0 = p
    i1 = p + 1
    if i0 < 0 or i0 > n - 1:
        w0 = 0.0
        i0 = 0
    if i1 < 0 or i1 > n - 1:
        w1 = 0.0
        i1 = 0
    return valid, i0, i1, w0, w1


@numba.njit(cache=True)
def _gain_kernel_2d(F, G, m, ba, fa, bb, fb, K, out):
    n = F.shape[0]
    nx = F.shape[2]
    for e in range(K.size):
        m0 = m[e, 0]
        m1 = m[e, 1]
        k = K[e]
        for i in range(max(0, -m0), min(n, n - m0)):
            va, a0, a1, wa0, wa1 = _stencil(i, ba[e, 0], fa[e, 0], n)
            vb, b0, b1, wb0, wb1 = _stencil(i, bb[e, 0], fb[e, 0], n)
            if not (va and vb):
                continue
            for j in range(max(0, -m1), min(n, n - m1)):
                vc, c0, c1, wc0, wc1 = _stencil(j, ba[e, 1], fa[e, 1], n)
                vd, d0, d1, wd0, wd1 = _stencil(j, bb[e, 1], fb[e, 1], n)
                if not (vc and vd):
                    continue
                f00 = wa0 * wc0
                f01 = wa0 * wc1
                f10 = wa1 * wc0
                f11 = wa1 * wc1
                g00 = wb0 * wd0
                g01 = wb0 * wd1
                g10 = wb1 * wd0
                g11 = wb1 * wd1
                for x in range(nx):
                    fv = (f00 * F[a0, c0, x] + f01 * F[a0, c1, x]
                          + f10 * F[a1, c0, x] + f11 * F[a1, c1, x])
                    gv = (g00 * G[b0, d0, x] + g01 * G[b0, d1, x]
                          + g10 * G[b1, d0, x] + g11 * G[b1, d1, x])
                    out[i, j, x] += k * fv * gv


@numba.njit(cache=True)
def _gain_kernel_3d(F, G, m, ba, fa, bb, fb, K, out):
    n = F.shape[0]
    nx = F.shape[3]
    ia = np.empty(2, np.int64)
    ja = np.empty(2, np.int64)
    ka = np.empty(2, np.int64)
    ib = np.empty(2, np.int64)
    jb = np.empty(2, np.int64)
    kb = np.empty(2, np.int64)
    wia = np.empty(2)
    wja = np.empty(2)
    wka = np.empty(2)
    wib = np.empty(2)
    wjb = np.empty(2)
    wkb = np.empty(2)
    for e in range(K.size):
        k = K[e]
        for i in range(max(0, -m[e, 0]), min(n, n - m[e, 0])):
            va, ia[0], ia[1], wia[0], wia[1] = _stencil(i, ba[e, 0], fa[e, 0], n)
            vb, ib[0], ib[1], wib[0], wib[1] = _stencil(i, bb[e, 0], fb[e, 0], n)
            if not (va and vb):
                continue
            for j in range(max(0, -m[e, 1]), min(n, n - m[e, 1])):
                vc, ja[0], ja[1], wja[0], wja[1] = _stencil(j, ba[e, 1], fa[e, 1], n)
                vd, jb[0], jb[1], wjb[0], wjb[1] = _stencil(j, bb[e, 1], fb[e, 1], n)
                if not (vc and vd):
                    continue
                for l in range(max(0, -m[e, 2]), min(n, n - m[e, 2])):
                    ve, ka[0], ka[1], wka[0], wka[1] = _stencil(l, ba[e, 2], fa[e, 2], n)
                    vf, kb[0], kb[1], wkb[0], wkb[1] = _stencil(l, bb[e, 2], fb[e, 2], n)
                    if not (ve and vf):
                        continue
                    for x in range(nx):
                        fv = 0.0
                        gv = 0.0
                        for p in range(2):
                            for q in range(2):
                                for s in range(2):
                                    fv += wia[p] * wja[q] * wka[s] * F[ia[p], ja[q], ka[s], x]
                                    gv += wib[p] * wjb[q] * wkb[s] * G[ib[p], jb[q], kb[s], x]
                        out[i, j, l, x] += k * fv * gv


def q_gain_direct(f: PhaseField, g: PhaseField, kernel: CollisionKernel, grid: Grid,
                  sq: SphereQuadrature | None = None) -> Dense:
    """Q+(f, g)(x, v) = sum_u sum_omega f(x, v*) g(x, u*) B(u - v, omega) h_v^d w_omega."""
    kernel.validate(grid.d)
    sq = sq or default_sphere(grid.d)
    d, n = grid.d, grid.n_v
    F = _as_dense(f, grid).flat()
    G = _as_dense(g, grid).flat()
    out = np.zeros_like(F)
    rows, first, inv = _active_rows(F, G)
    if rows.size == 0:
        return Dense(grid, out)
    m, ba, fa, bb, fb, K = _gain_table(kernel, grid, sq)
    # velocity-major layout so the innermost loop runs over x
    Fv = np.ascontiguousarray(F[rows[first]].T).reshape((n,) * d + (-1,))
    Gv = np.ascontiguousarray(G[rows[first]].T).reshape((n,) * d + (-1,))
    acc = np.zeros_like(Fv)
    if K.size:
        kern = _gain_kernel_2d if d == 2 else _gain_kernel_3d
        kern(Fv, Gv, m, ba, fa, bb, fb, K, acc)
    res = acc.reshape(n ** d, -1).T
    out[rows] = res[inv]
    _add_self_cell(out, F, G, rows, kernel, grid)
    return Dense(grid, out)


# ---------------------------------------------------------------- spectral forms

@dataclass(frozen=True)
class EtaQuadrature:
    """Radial Gauss-Jacobi (weight r^{-1-gamma}) times uniform angular rule for eta."""

    radius: float
    n_r: int = 16
    n_ang: int = 32

    def nodes(self, d: int, gamma: float):
        x, w = special.roots_jacobi(self.n_r, 0.0, -1.0 - gamma)
        r = self.radius * (1.0 + x) / 2.0
        # int_0^R phi(r) r^{-1-gamma} dr with r = R(1+x)/2
        wr = w * (self.radius / 2.0) ** (-gamma)
        if d == 2:
            sq = sphere_quadrature(2, max(self.n_ang, 4))
        else:
            sq = sphere_quadrature(3, max(self.n_ang, 4))
        pts = r[:, None, None] * sq.nodes[None, :, :]
        wts = wr[:, None] * sq.weights[None, :]
        return pts.reshape(-1, d), wts.ravel()


def riesz_constant(d: int, gamma: float) -> float:
    """c with int |w|^gamma e^{-i k.w} dw = c |k|^{-d-gamma}, -d < gamma < 0."""
    return 2.0 ** (d + gamma) * np.pi ** (d / 2) * gamma_fn((d + gamma) / 2) / gamma_fn(-gamma / 2)


class _Spectrum:
    """Continuous Fourier transform f_hat(xi) = int f(v) e^{-i v.xi} dv of grid rows.

    Sampled on a zero-padded (oversampled) frequency lattice and read off at
    arbitrary xi by cubic spline interpolation.
    """

    def __init__(self, rows: np.ndarray, grid: Grid, pad: int = 4):
        d, n, h = grid.d, grid.n_v, grid.h_v
        self.d, self.N, self.h = d, pad * n, h
        N = self.N
        arr = np.zeros((rows.shape[0],) + (N,) * d)
        arr[(slice(None),) + (slice(0, n),) * d] = rows.reshape((-1,) + (n,) * d)
        spec = sfft.fftn(arr, axes=tuple(range(1, d + 1)))
        k = sfft.fftfreq(N, d=h) * 2.0 * np.pi
        # nodes start at -L_v: f_hat(xi) = h^d e^{i xi L} DFT
        phase = np.exp(1j * k * grid.L_v)
        for ax in range(d):
            shape = [1] * (d + 1)
            shape[ax + 1] = N
            spec = spec * phase.reshape(shape)
        spec *= h ** d
        self.values = sfft.fftshift(spec, axes=tuple(range(1, d + 1)))
        self.k0 = -np.pi / h          # first shifted frequency
        self.dk = 2.0 * np.pi / (N * h)
        self._coef = [(ndimage.spline_filter(self.values[i].real, order=3, mode="constant"),
                       ndimage.spline_filter(self.values[i].imag, order=3, mode="constant"))
                      for i in range(rows.shape[0])]

    def __call__(self, i: int, xi: np.ndarray) -> np.ndarray:
        c = ((xi - self.k0) / self.dk).T
        re, im = self._coef[i]
        kw = dict(order=3, mode="constant", cval=0.0, prefilter=False)
        out = ndimage.map_coordinates(re, c, **kw) + 1j * ndimage.map_coordinates(im, c, **kw)
        outside = np.any((c < 0) | (c > self.N - 1), axis=0)
        out[outside] = 0.0
        return out


def _xi_grid(grid: Grid) -> np.ndarray:
    k = grid.v_freqs()
    mesh = np.meshgrid(*([k] * grid.d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _to_velocity(spec_vals: np.ndarray, grid: Grid) -> np.ndarray:
    """Inverse of the continuous transform for values on the unshifted xi grid."""
    d, n, h = grid.d, grid.n_v, grid.h_v
    k = grid.v_freqs()
    arr = spec_vals.reshape((n,) * d).astype(complex)
    phase = np.exp(-1j * k * grid.L_v)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = n
        arr = arr * phase.reshape(shape)
    return (sfft.ifftn(arr).real / h ** d).ravel()


def _check_spectral(kernel: CollisionKernel, grid: Grid, eta: EtaQuadrature | None):
    kernel.validate(grid.d)
    if kernel.variant != "power_law":
        raise UnsupportedError("spectral forms need the power-law kernel")
    if kernel.gamma == 0:
        raise UnsupportedError("gamma = 0: the eta weight is not locally integrable; use the direct form")
    nyq = np.pi / grid.h_v
    eta = eta or EtaQuadrature(radius=nyq)
    if eta.radius > nyq * (1 + 1e-12):
        raise ResolutionError(f"eta radius {eta.radius} exceeds the xi Nyquist {nyq}")
    return eta


def q_gain_spectral(f: PhaseField, g: PhaseField, kernel: CollisionKernel, grid: Grid,
                    sq: SphereQuadrature | None = None, eta_quad: EtaQuadrature | None = None,
                    pad: int = 4) -> Dense:
    """Gain term through the Bobylev representation.

    F[Q+](xi) = (2 pi)^{-d} c_{d,gamma} int_S b_sigma(xi_hat.sigma)
                int f_hat(xi^- + eta) g_hat(xi^+ - eta) |eta|^{-d-gamma} d eta d sigma
    with xi^{+-} = (xi +- |xi| sigma)/2 and b_sigma the sigma-form of b.
    """
    eta = _check_spectral(kernel, grid, eta_quad)
    d = grid.d
    sq = sq or default_sphere(d)
    F = _as_dense(f, grid).flat()
    G = _as_dense(g, grid).flat()
    out = np.zeros_like(F)
    rows, first, inv = _active_rows(F, G)
    if rows.size == 0:
        return Dense(grid, out)
    fs = _Spectrum(F[rows[first]], grid, pad)
    gs = _Spectrum(G[rows[first]], grid, pad)
    xi = _xi_grid(grid)
    xn = np.sqrt(np.sum(xi ** 2, axis=1))
    # at xi = 0 any direction gives the same sigma-integral
    e1 = np.zeros(d)
    e1[0] = 1.0
    xhat = np.where(xn[:, None] > 0, xi / np.where(xn > 0, xn, 1.0)[:, None], e1)
    epts, ewts = eta.nodes(d, kernel.gamma)
    const = riesz_constant(d, kernel.gamma) / (2.0 * np.pi) ** d
    res = np.zeros((first.size, xi.shape[0]))
    for k in range(first.size):
        acc = np.zeros(xi.shape[0], complex)
        for s_node, s_w in zip(sq.nodes, sq.weights):
            bs = kernel.b_sigma(xhat @ s_node, d)
            xp = 0.5 * (xi + xn[:, None] * s_node[None, :])
            xm = xi - xp
            a = (xm[:, None, :] + epts[None, :, :]).reshape(-1, d)
            b = (xp[:, None, :] - epts[None, :, :]).reshape(-1, d)
            prod = (fs(k, a) * gs(k, b)).reshape(xi.shape[0], -1) @ ewts
            acc += s_w * bs * prod
        res[k] = _to_velocity(const * acc, grid)
    out[rows] = res[inv]
    return Dense(grid, out)


def q_loss_spectral(f: PhaseField, g: PhaseField, kernel: CollisionKernel, grid: Grid,
                    eta_quad: EtaQuadrature | None = None, pad: int = 4) -> Dense:
    """Loss term as ||b||_{L^1} f * F^{-1}[ c (2 pi)^{-d} int g_hat(eta)|eta|^{-d-gamma} e^{i v.eta} ].

    The eta integral is the transform of the partner density against the
    singular weight; for gamma = 0 it degenerates to f * int g du * ||b||.
    """
    kernel.validate(grid.d)
    d = grid.d
    bl1 = kernel.b_l1(d)
    F = _as_dense(f, grid).flat()
    G = _as_dense(g, grid).flat()
    if kernel.gamma == 0 and kernel.variant == "power_law":
        mass = G.sum(axis=1, keepdims=True) * grid.h_v ** d
        return Dense(grid, F * mass * bl1)
    eta = _check_spectral(kernel, grid, eta_quad)
    out = np.zeros_like(F)
    rows, first, inv = _active_rows(F, G)
    if rows.size == 0:
        return Dense(grid, out)
    gs = _Spectrum(G[rows[first]], grid, pad)
    epts, ewts = eta.nodes(d, kernel.gamma)
    v = grid.v_points()
    const = riesz_constant(d, kernel.gamma) / (2.0 * np.pi) ** d
    res = np.zeros((first.size, v.shape[0]))
    # g * |.|^gamma at v = (2pi)^{-d} c int g_hat(eta) |eta|^{-d-gamma} e^{i v.eta} d eta
    phase = np.exp(1j * (v @ epts.T))
    for k in range(first.size):
        gh = gs(k, epts)
        res[k] = const * (phase @ (gh * ewts)).real
    out[rows] = bl1 * F[rows] * res[inv]
    return Dense(grid, out)


# ---------------------------------------------------------------- diagnostics

def collision_invariants(f: PhaseField, kernel: CollisionKernel, grid: Grid,
                         sq: SphereQuadrature | None = None):
    """Max over x of |int Q(f,f) psi dv| / (1 + |int Q+(f,f) psi dv|), psi in {1, v, |v|^2}."""
    sq = sq or default_sphere(grid.d)
    gain = q_gain_direct(f, f, kernel, grid, sq).flat()
    loss = q_loss_direct(f, f, kernel, grid, sq).flat()
    q = gain - loss
    v = grid.v_points()
    dv = grid.h_v ** grid.d

    def resid(psi):
        num = np.abs(q @ psi) * dv
        den = 1.0 + np.abs(gain @ psi) * dv
        if num.ndim == 2:
            num = np.linalg.norm(num, axis=1)
            den = 1.0 + np.linalg.norm(gain @ psi, axis=1) * dv
        return float(np.max(num / den)) if num.size else 0.0

    mass = resid(np.ones(v.shape[0]))
    mom = resid(v)
    en = resid(np.sum(v * v, axis=1))
    return mass, mom, en
