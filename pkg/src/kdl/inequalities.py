"""
Randomized checks of the functional inequalities the analysis relies on.

Each kind draws nonnegative compactly supported fields (truncated Gaussians
and indicators of balls), evaluates LHS / RHS and keeps the worst ratio.
Trial ``k`` of seed ``s`` always sees the same fields: its generator is a
Philox stream keyed by (s, k), so trials can run in any order.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from scipy import fft as sfft
from scipy import signal

from .collision import CollisionKernel, _loss_weights, default_sphere, q_gain_direct, q_loss_direct
from .errors import ExponentError, ValidationError
from .field import Dense, Grid, smooth_cutoff
from .jsonio import dumps

_TOL = 1e-9


@dataclass
class InequalityReport:
    kind: str
    trials: int
    worst_ratio: float
    seed: int
    params: dict = dc_field(default_factory=dict)
    ratios: np.ndarray | None = dc_field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "trials": self.trials, "worst_ratio": self.worst_ratio,
                "seed": self.seed, "params": self.params}

    def to_json(self) -> str:
        return dumps(self.to_dict())


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Counter-based stream for one trial."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial)])))


# ---------------------------------------------------------------- lattices and fields

def lattice(d: int, n: int, L: float):
    """Nodes -L + i*h of the cube [-L, L)^d, flattened to (n^d, d), and h."""
    h = 2.0 * L / n
    ax = -L + h * np.arange(n)
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1), h


def random_field(rng: np.random.Generator, pts: np.ndarray, L: float, smooth: bool = False,
                 max_bumps: int = 3) -> np.ndarray:
    """Sum of 1..max_bumps truncated Gaussians / ball indicators with support inside 0.7L.

    With ``smooth`` the indicators become plateau bumps chi(|x - c| / rho).
    """
    d = pts.shape[1]
    out = np.zeros(pts.shape[0])
    for _ in range(int(rng.integers(1, max_bumps + 1))):
        c = rng.uniform(-0.25 * L, 0.25 * L, d)
        rho = rng.uniform(0.08, 0.15) * L
        a = rng.uniform(0.2, 1.0)
        r = np.sqrt(np.sum((pts - c) ** 2, axis=1))
        if rng.random() < 0.5:
            out += a * np.exp(-(r / rho) ** 2) * smooth_cutoff(r / (1.25 * rho))
        elif smooth:
            out += a * smooth_cutoff(r / rho)
        else:
            out += a * (r <= 2.0 * rho)
    if not np.any(out > 0):
        out[np.argmin(np.sum(pts ** 2, axis=1))] = 1.0
    return out


def lp_norm(a: np.ndarray, p: float, vol: float) -> float:
    a = np.abs(a)
    if np.isinf(p):
        return float(np.max(a))
    return float((np.sum(a ** p) * vol) ** (1.0 / p))


def _riesz_stencil(d: int, n: int, h: float, gamma: float) -> np.ndarray:
    """|m h|^gamma on offsets m in (-(n-1)..n-1)^d; the origin holds the cell average."""
    m = np.arange(-(n - 1), n) * h
    mesh = np.meshgrid(*([m] * d), indexing="ij")
    r = np.sqrt(sum(a * a for a in mesh))
    with np.errstate(divide="ignore"):
        K = np.where(r > 0, r ** gamma, 0.0)
    # cell average of |x|^gamma over [-h/2, h/2]^d by a midpoint rule
    k = 64
    s = (np.arange(k) + 0.5) / k - 0.5
    sub = np.meshgrid(*([s * h] * d), indexing="ij")
    K[(n - 1,) * d] = np.mean(np.sqrt(sum(a * a for a in sub)) ** gamma)
    return K


def _require(cond: bool, msg: str):
    if not cond:
        raise ExponentError(msg)


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= _TOL


def _inv(p: float) -> float:
    return 0.0 if np.isinf(p) else 1.0 / p


# ---------------------------------------------------------------- kinds

class _Kind:
    name = ""
    defaults: dict = {}

    def __init__(self, params: dict):
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise ValidationError(f"{self.name}: unknown parameters {sorted(unknown)}")
        self.p = {**self.defaults, **params}
        self.validate()
        self.setup()

    def validate(self):
        pass

    def setup(self):
        pass

    def trial(self, rng: np.random.Generator):
        raise NotImplementedError


class HLS(_Kind):
    name = "HLS"
    defaults = {"d": 2, "gamma": -0.5, "p": 8 / 7, "r": 8 / 7, "n": 64, "L": 4.0}

    def validate(self):
        d, g, p, r = (self.p[k] for k in ("d", "gamma", "p", "r"))
        _require(p > 1 and r > 1, f"HLS needs p > 1 and r > 1, got p={p}, r={r}")
        _require(-d < g <= 0, f"HLS needs -d < gamma <= 0, got gamma={g}")
        _require(_close(1 / p + 1 / r, 2 + g / d),
                 f"HLS scaling 1/p + 1/r = 2 + gamma/d violated: {1 / p + 1 / r} != {2 + g / d}")

    def setup(self):
        d, n, L = self.p["d"], self.p["n"], self.p["L"]
        self.pts, self.h = lattice(d, n, L)
        self.K = _riesz_stencil(d, n, self.h, self.p["gamma"])

    def trial(self, rng):
        d, n, L = self.p["d"], self.p["n"], self.p["L"]
        f = random_field(rng, self.pts, L)
        g = random_field(rng, self.pts, L)
        vol = self.h ** d
        conv = signal.fftconvolve(g.reshape((n,) * d), self.K, mode="same")
        lhs = vol * vol * np.sum(f.reshape((n,) * d) * conv)
        rhs = lp_norm(f, self.p["p"], vol) * lp_norm(g, self.p["r"], vol)
        return lhs, rhs


class EndpointHLS(_Kind):
    name = "EndpointHLS"
    defaults = {"d": 2, "gamma": -0.5, "p": 1.0, "q": 4.0, "n": 64, "L": 4.0}

    def validate(self):
        d, g, p, q = (self.p[k] for k in ("d", "gamma", "p", "q"))
        _require(d >= 2 and -d < g <= 0, f"EndpointHLS needs d >= 2 and -d < gamma <= 0, got d={d}, gamma={g}")
        crit = d / (d + g)
        _require(1 <= p < crit < q,
                 f"EndpointHLS needs 1 <= p < d/(d+gamma) < q, got p={p}, d/(d+gamma)={crit}, q={q}")
        den = 1 / p - _inv(q)
        self.t1 = ((1 - _inv(q)) + g / d) / den
        self.t2 = (-g / d - (1 - 1 / p)) / den

    def setup(self):
        d, n, L = self.p["d"], self.p["n"], self.p["L"]
        self.pts, self.h = lattice(d, n, L)
        K = _riesz_stencil(d, n, self.h, self.p["gamma"])
        self.w = K[(slice(n - 1 - n // 2, 2 * n - 1 - n // 2),) * d].ravel()

    def trial(self, rng):
        f = random_field(rng, self.pts, self.p["L"])
        vol = self.h ** self.p["d"]
        lhs = vol * np.sum(self.w * np.abs(f))
        rhs = lp_norm(f, self.p["p"], vol) ** self.t1 * lp_norm(f, self.p["q"], vol) ** self.t2
        return lhs, rhs


class _VelocityKind(_Kind):
    """Velocity-only fields carried on a Dense grid whose x-rows are identical."""

    def kernel(self) -> CollisionKernel:
        return CollisionKernel(gamma=self.p["gamma"], angular=self.p["angular"])

    def setup(self):
        d, n, L = self.p["d"], self.p["n"], self.p["L"]
        try:
            self.ker = self.kernel()
            self.ker.validate(d)
        except ValidationError as exc:
            raise ExponentError(str(exc)) from exc
        self.grid = Grid(d, 1.0, 8, L, n)
        self.pts, self.h = lattice(d, n, L)
        self.sq = default_sphere(d)

    def dense(self, a: np.ndarray) -> Dense:
        return Dense(self.grid, np.broadcast_to(a, (8 ** self.p["d"], a.size)))


def _bilinear_relation(name, d, g, p, q, r):
    _require(1 < p < np.inf and 1 < q < np.inf and 1 < r < np.inf,
             f"{name} needs 1 < p, q, r < inf, got p={p}, q={q}, r={r}")
    _require(-d < g <= 0, f"{name} needs -d < gamma <= 0, got gamma={g}")
    _require(_close(1 / p + 1 / q, 1 + g / d + 1 / r),
             f"{name} scaling 1/p + 1/q = 1 + gamma/d + 1/r violated: "
             f"{1 / p + 1 / q} != {1 + g / d + 1 / r}")


class QGainLr(_VelocityKind):
    name = "QGainLr"
    defaults = {"d": 2, "gamma": -0.5, "angular": "abs_cos", "p": 2.0, "q": 2.0, "r": 4.0,
                "n": 16, "L": 4.0}

    def validate(self):
        _bilinear_relation(self.name, *(self.p[k] for k in ("d", "gamma", "p", "q", "r")))

    def evaluate(self, f: np.ndarray, g: np.ndarray):
        Q = q_gain_direct(self.dense(f), self.dense(g), self.ker, self.grid, self.sq).flat()[0]
        vol = self.h ** self.p["d"]
        return lp_norm(Q, self.p["r"], vol), lp_norm(f, self.p["p"], vol) * lp_norm(g, self.p["q"], vol)

    def trial(self, rng):
        L = self.p["L"]
        return self.evaluate(random_field(rng, self.pts, L), random_field(rng, self.pts, L))


class QLossLr(QGainLr):
    name = "QLossLr"
    defaults = {"d": 2, "gamma": -0.5, "angular": "abs_cos", "p": 3.0, "q": 12 / 11, "r": 2.0,
                "n": 16, "L": 4.0}

    def validate(self):
        super().validate()
        _require(self.p["p"] > self.p["r"], f"QLossLr needs p > r, got p={self.p['p']}, r={self.p['r']}")

    def evaluate(self, f, g):
        Q = q_loss_direct(self.dense(f), self.dense(g), self.ker, self.grid, self.sq).flat()[0]
        vol = self.h ** self.p["d"]
        return lp_norm(Q, self.p["r"], vol), lp_norm(f, self.p["p"], vol) * lp_norm(g, self.p["q"], vol)


class QGainL1(_VelocityKind):
    """L^1 endpoint for gamma = -1 (admissible for d = 3).

    For nonnegative data the L^1 norm of the gain term equals its integral,
    which the pre/post-collision change of variables turns into
    ||b||_1 * int int f(v) g(u) |u - v|^gamma du dv; that double sum is what
    we evaluate, with the same lattice weights as the loss operator.
    """

    name = "QGainL1"
    defaults = {"d": 3, "gamma": -1.0, "angular": "abs_cos", "p": 2.0, "side": "g",
                "n": 16, "L": 4.0}

    def validate(self):
        d, g, p = self.p["d"], self.p["gamma"], self.p["p"]
        _require(g == -1.0, f"QGainL1 is the gamma = -1 endpoint, got gamma={g}")
        _require(d / (d - 1) < p <= np.inf, f"QGainL1 needs p > d/(d-1) = {d / (d - 1)}, got p={p}")
        _require(self.p["side"] in ("f", "g"), "side must be 'f' or 'g'")
        self.theta = 1.0 / (d * (1.0 - _inv(p)))

    def setup(self):
        super().setup()
        self.W = _loss_weights(self.ker, self.grid, self.sq)

    def trial(self, rng):
        d, n, L = self.p["d"], self.p["n"], self.p["L"]
        f = random_field(rng, self.pts, L)
        g = random_field(rng, self.pts, L)
        vol = self.h ** d
        Wf = self.W[(slice(None, None, -1),) * d]
        S = signal.fftconvolve(g.reshape((n,) * d), Wf, mode="full")[(slice(n - 1, 2 * n - 1),) * d]
        lhs = vol * np.sum(f * S.ravel())
        a, b = (f, g) if self.p["side"] == "g" else (g, f)
        p, t = self.p["p"], self.theta
        rhs = lp_norm(a, 1.0, vol) * lp_norm(b, 1.0, vol) ** (1 - t) * lp_norm(b, p, vol) ** t
        return lhs, rhs


class QGainHalfHalf(_VelocityKind):
    """L^2 of the Fourier-side gain term against L^a x L^b norms of the spectra.

    a = 2pd/(2d - p gamma), b = 2qd/(2d - q gamma), 1/p + 1/q = 1/2.  The LHS
    is ||F[Q+(f, g)]||_{L^2_xi}, obtained from the velocity side by Plancherel.
    """

    name = "QGainHalfHalf"
    defaults = {"d": 2, "gamma": -0.5, "angular": "abs_cos", "p": 8 / 3, "q": 8.0,
                "n": 16, "L": 4.0, "pad": 2}

    def validate(self):
        d, g, p, q = (self.p[k] for k in ("d", "gamma", "p", "q"))
        _require(p >= 2 and q >= 2, f"QGainHalfHalf needs p, q >= 2, got p={p}, q={q}")
        _require(-d < g <= 0, f"QGainHalfHalf needs -d < gamma <= 0, got gamma={g}")
        _require(_close(_inv(p) + _inv(q), 0.5),
                 f"QGainHalfHalf scaling 1/p + 1/q = 1/2 violated: {_inv(p) + _inv(q)} != 0.5")
        self.a = 2 * d / (2 * d * _inv(p) - g)
        self.b = 2 * d / (2 * d * _inv(q) - g)

    def spectrum(self, f: np.ndarray):
        d, n, pad = self.p["d"], self.p["n"], self.p["pad"]
        F = sfft.fftn(f.reshape((n,) * d), s=(pad * n,) * d) * self.h ** d
        dxi = 2.0 * np.pi / (pad * n * self.h)
        return np.abs(F).ravel(), dxi ** d

    def trial(self, rng):
        d, L = self.p["d"], self.p["L"]
        f = random_field(rng, self.pts, L)
        g = random_field(rng, self.pts, L)
        Q = q_gain_direct(self.dense(f), self.dense(g), self.ker, self.grid, self.sq).flat()[0]
        lhs = (2.0 * np.pi) ** (d / 2.0) * lp_norm(Q, 2.0, self.h ** d)
        Ff, vol = self.spectrum(f)
        Fg, _ = self.spectrum(g)
        return lhs, lp_norm(Ff, self.a, vol) * lp_norm(Fg, self.b, vol)


class FracLeibniz(_Kind):
    name = "FracLeibniz"
    defaults = {"d": 2, "s": 1.0, "r": 2.0, "p1": 4.0, "q1": 4.0, "p2": 4.0, "q2": 4.0,
                "n": 64, "L": 4.0}

    def validate(self):
        s, r = self.p["s"], self.p["r"]
        _require(1 < r < np.inf and s >= 0, f"FracLeibniz needs 1 < r < inf and s >= 0, got r={r}, s={s}")
        for i in (1, 2):
            a, b = self.p[f"p{i}"], self.p[f"q{i}"]
            _require(a >= 1 and b >= 1, f"FracLeibniz exponents must be >= 1, got p{i}={a}, q{i}={b}")
            _require(_close(1 / r, _inv(a) + _inv(b)),
                     f"FracLeibniz scaling 1/r = 1/p{i} + 1/q{i} violated: {1 / r} != {_inv(a) + _inv(b)}")
        _require(self.p["q1"] > 1 and self.p["p2"] > 1, "FracLeibniz needs q1 > 1 and p2 > 1")

    def setup(self):
        d, n, L = self.p["d"], self.p["n"], self.p["L"]
        self.pts, self.h = lattice(d, n, L)
        k = 2.0 * np.pi * sfft.fftfreq(n, d=self.h)
        mesh = np.meshgrid(*([k] * d), indexing="ij")
        self.sym = (1.0 + sum(a * a for a in mesh)) ** (0.5 * self.p["s"])

    def bracket(self, a: np.ndarray) -> np.ndarray:
        n, d = self.p["n"], self.p["d"]
        return sfft.ifftn(self.sym * sfft.fftn(a.reshape((n,) * d))).real.ravel()

    def trial(self, rng):
        L, vol = self.p["L"], self.h ** self.p["d"]
        f = random_field(rng, self.pts, L, smooth=True)
        g = random_field(rng, self.pts, L, smooth=True)
        P = self.p
        lhs = lp_norm(self.bracket(f * g), P["r"], vol)
        rhs = (lp_norm(self.bracket(f), P["p1"], vol) * lp_norm(g, P["q1"], vol)
               + lp_norm(f, P["p2"], vol) * lp_norm(self.bracket(g), P["q2"], vol))
        return lhs, rhs


class Strichartz(_Kind):
    """||exp(i t grad_xi . grad_x) phi0||_{L^q_t L^p_{x,xi}} / ||phi0||_{L^2} on t in [0, T].

    The symbol eta . zeta splits over coordinate pairs (x_i, xi_i), so for
    product data phi0 = prod_i phi_i(x_i, xi_i) the evolution and every L^p
    norm factor into planar pieces; the random family is of that form.
    """

    name = "Strichartz"
    defaults = {"d": 2, "q": 2.0, "p": 4.0, "n": 64, "L": 8.0, "T": 1.0, "n_t": 33}

    def validate(self):
        d, q, p = self.p["d"], self.p["q"], self.p["p"]
        _require(d >= 2 and q >= 2, f"Strichartz needs d >= 2 and q >= 2, got d={d}, q={q}")
        _require(_close(2 / q + 2 * d / p, d),
                 f"Strichartz admissibility 2/q + 2d/p = d violated: {2 / q + 2 * d / p} != {d}")

    def setup(self):
        n, L = self.p["n"], self.p["L"]
        self.pts, self.h = lattice(2, n, L)
        k = 2.0 * np.pi * sfft.fftfreq(n, d=self.h)
        self.kk = k[:, None] * k[None, :]
        self.t = np.linspace(0.0, self.p["T"], self.p["n_t"])

    def trial(self, rng):
        n, L, d = self.p["n"], self.p["L"], self.p["d"]
        p, q = self.p["p"], self.p["q"]
        vol = self.h ** 2
        norms = np.ones(self.t.size)
        rhs = 1.0
        for _ in range(d):
            phi = random_field(rng, self.pts, L, smooth=True).reshape(n, n)
            spec = sfft.fft2(phi)
            for j, t in enumerate(self.t):
                u = sfft.ifft2(spec * np.exp(-1j * t * self.kk))
                norms[j] *= lp_norm(u, p, vol)
            rhs *= lp_norm(phi, 2.0, vol)
        w = np.full(self.t.size, self.t[1] - self.t[0])
        w[[0, -1]] *= 0.5
        lhs = np.sum(w * norms ** q) ** (1.0 / q)
        return lhs, rhs


INEQUALITIES: dict[str, Callable[[dict], _Kind]] = {
    k.name: k for k in (HLS, EndpointHLS, QGainLr, QLossLr, QGainL1, QGainHalfHalf, FracLeibniz, Strichartz)
}


def check_inequality(kind: str, inputs: dict | None = None, trials: int = 100, seed: int = 0,
                     keep_ratios: bool = False) -> InequalityReport:
    """Worst LHS/RHS over ``trials`` random field draws."""
    if kind not in INEQUALITIES:
        raise ValidationError(f"unknown inequality {kind!r}; choose from {sorted(INEQUALITIES)}")
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    check = INEQUALITIES[kind](dict(inputs or {}))
    ratios = np.empty(trials)
    for k in range(trials):
        lhs, rhs = check.trial(trial_rng(seed, k))
        ratios[k] = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
    return InequalityReport(kind, trials, float(np.max(ratios)), int(seed), dict(check.p),
                            ratios if keep_ratios else None)
