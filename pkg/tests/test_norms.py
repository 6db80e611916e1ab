import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdl.errors import ExponentError, RepresentationError, ResolutionError, ValidationError
from kdl.field import Analytic, Box, Dense, Grid, Trajectory
from kdl.norms import (
    NormSpec,
    critical_indices,
    grad_x,
    japanese,
    lp_project,
    lp_symbol,
    mixed_profile,
    sobolev_norm,
    xsrb_norm,
    z_norm,
    z_terms,
)


def separable(grid, ax_fn, v_fn):
    return Dense(grid, ax_fn(grid.x_points())[:, None] * v_fn(grid.v_points())[None, :])


def bump_v(v):
    return np.exp(-np.sum(v * v, -1))


# ---------------------------------------------------------------- Sobolev

def test_plain_l2():
    g = Grid(2, 1.0, 8, 2.0, 8)
    f = Dense(g, np.random.default_rng(0).standard_normal(g.shape))
    ref = np.sqrt(np.sum(f.values ** 2) * g.cell_volume)
    assert sobolev_norm(f, 0.0, 0.0) == pytest.approx(ref, rel=1e-12)


def test_sobolev_of_single_mode():
    # cos(k x1) is an eigenfunction of <grad_x>^s with eigenvalue <k>^s
    g = Grid(2, np.pi, 16, 2.0, 16)
    k = 3.0
    f = separable(g, lambda x: np.cos(k * x[:, 0]), bump_v)
    base = sobolev_norm(f, 0.0, 0.0)
    for s in (0.25, 0.5, 1.0):
        assert sobolev_norm(f, s, 0.0) == pytest.approx((1 + k * k) ** (s / 2) * base, rel=1e-12)
    v = g.v_points()
    vw = np.sum(bump_v(v) ** 2 * (1 + np.sum(v * v, 1)) ** 0.25)
    assert sobolev_norm(f, 0.0, 0.25) / base == pytest.approx(np.sqrt(vw / np.sum(bump_v(v) ** 2)), rel=1e-12)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=50, deadline=None)
def test_sobolev_monotone(seed):
    g = Grid(2, 1.0, 8, 2.0, 8)
    f = Dense(g, np.random.default_rng(seed).standard_normal(g.shape))
    table = np.array([[sobolev_norm(f, s, r) for r in (0.0, 0.5, 1.0)] for s in (0.0, 0.5, 1.0)])
    assert np.all(np.diff(table, axis=0) >= 0) and np.all(np.diff(table, axis=1) >= 0)


def test_analytic_needs_plan():
    f = Analytic(lambda x, v: np.zeros(np.broadcast_shapes(x.shape, v.shape)[:-1]), Box.symmetric(2, 1, 1))
    with pytest.raises(RepresentationError):
        sobolev_norm(f, 0.0, 0.0)
    assert sobolev_norm(f, 0.0, 0.0, plan=Grid(2, 1.0, 8, 1.0, 8)) == 0.0


def test_japanese():
    assert japanese(np.array([[3.0, 4.0]]), 1.0)[0] == pytest.approx(np.sqrt(26.0))
    assert japanese(np.array([0.0, 2.0]), 2.0).tolist() == [1.0, 5.0]


# ---------------------------------------------------------------- Littlewood-Paley

def test_lp_symbol_values():
    k = np.array([[3.0, 0.0]])
    vals = {N: float(lp_symbol(k, N)[0]) for N in (1, 2, 4, 8)}
    assert vals == pytest.approx({1: 0.0, 2: 0.5, 4: 0.5, 8: 0.0}, abs=1e-15)


def test_lp_telescopes():
    # modes with |k| <= 3: phi_1 + phi_2 + phi_4 = chi(k/4) = 1 on them
    g = Grid(2, np.pi, 16, 1.0, 8)
    x = g.x_points()
    ax = np.cos(x[:, 0]) + 0.5 * np.sin(2 * x[:, 1]) + 0.3 * np.cos(2 * x[:, 0] + 2 * x[:, 1]) + 1.0
    f = separable(g, lambda _: ax, bump_v)
    total = sum(lp_project(f, N).values for N in (1, 2, 4))
    assert np.allclose(total, f.values, atol=1e-12)


def test_lp_almost_orthogonal():
    g = Grid(2, np.pi, 16, 1.0, 8)
    rng = np.random.default_rng(1)
    ax = rng.standard_normal(g.n_x ** 2)
    f = separable(g, lambda _: ax, bump_v)
    pieces = [lp_project(f, N) for N in (1, 2, 4, 8)]
    total = sum(p.values for p in pieces)
    # the top piece is cut at the Nyquist frequency; compare with the sum itself
    lhs = np.sum(total ** 2)
    rhs = sum(np.sum(p.values ** 2) for p in pieces)
    assert rhs <= lhs * (1 + 1e-12)
    assert lhs <= 3.0 * rhs
    # non-adjacent pieces are orthogonal
    assert abs(np.sum(pieces[0].values * pieces[2].values)) <= 1e-10 * lhs


def test_lp_far_shells_annihilate():
    g = Grid(2, np.pi, 32, 1.0, 8)
    f = Dense(g, np.random.default_rng(2).standard_normal(g.shape))
    for N, Np in ((1, 8), (2, 16), (16, 2)):
        assert np.max(np.abs(lp_project(lp_project(f, N), Np).values)) <= 1e-13


def test_lp_errors():
    g = Grid(2, 1.0, 8, 1.0, 8)
    f = Dense.zeros(g)
    with pytest.raises(ValidationError):
        lp_project(f, 3)
    with pytest.raises(ResolutionError):
        lp_project(f, 64)


# ---------------------------------------------------------------- gradient and Z-norm

def test_grad_x_of_mode():
    g = Grid(2, np.pi, 16, 1.0, 8)
    f = separable(g, lambda x: np.cos(2 * x[:, 0]) * np.sin(x[:, 1]), bump_v)
    gr = grad_x(f).reshape(g.n_x ** 2, -1, 2)
    x = g.x_points()
    bv = bump_v(g.v_points())
    assert np.allclose(gr[..., 0], (-2 * np.sin(2 * x[:, 0]) * np.sin(x[:, 1]))[:, None] * bv, atol=1e-12)
    assert np.allclose(gr[..., 1], (np.cos(2 * x[:, 0]) * np.cos(x[:, 1]))[:, None] * bv, atol=1e-12)


def test_z_norm_separable_oracle():
    g = Grid(2, np.pi, 16, 2.0, 16)
    A = lambda x: 2.0 + np.cos(x[:, 0])
    f = separable(g, A, bump_v)
    M, N2, gamma, r0 = 4.0, 8.0, -0.5, 0.0
    x, v = g.x_points(), g.v_points()
    B = bump_v(v)
    hv, hx = g.h_v ** 2, g.h_x ** 2
    a_l2 = np.sqrt(hx * np.sum(A(x) ** 2))
    da = np.abs(np.sin(x[:, 0]))
    da_l2 = np.sqrt(hx * np.sum(da ** 2))
    a_sup, da_sup = 3.0, np.max(da)
    c = N2 ** (4 / 5 + gamma)
    l53 = np.sum(B ** (5 / 3) * hv) ** 0.6
    ref = (M ** -0.5 * da_l2 * np.sqrt(np.sum(B * B * hv))
           + M ** 0.5 * a_l2 * np.sqrt(np.sum(B * B * hv))
           + N2 ** gamma * a_sup * np.sum(B * hv) + c * a_sup * l53
           + N2 ** gamma / M * da_sup * np.sum(B * hv) + c / M * da_sup * l53)
    assert z_norm(f, M, N2, gamma, r0) == pytest.approx(ref, rel=1e-12)


@given(st.floats(-5, 5), st.integers(0, 10 ** 6))
@settings(max_examples=15, deadline=None)
def test_z_norm_seminorm(a, seed):
    g = Grid(2, 1.0, 8, 2.0, 8)
    rng = np.random.default_rng(seed)
    f = Dense(g, rng.standard_normal(g.shape))
    h = Dense(g, rng.standard_normal(g.shape))
    args = (4.0, 8.0, -0.5, 0.25)
    zf = z_norm(f, *args)
    assert z_norm(a * f, *args) == pytest.approx(abs(a) * zf, rel=1e-12, abs=1e-12 * zf)
    assert z_norm(f + h, *args) <= zf + z_norm(h, *args) + 1e-12
    assert np.all(z_terms(mixed_profile(f), *args) <= zf)
    # one summand is M^{(d-1)/2} ||f||_{L^{2,r0}}
    assert zf >= args[0] ** 0.5 * sobolev_norm(f, 0.0, args[3]) * (1 - 1e-12)


def test_z_norm_of_zero():
    g = Grid(2, 1.0, 8, 2.0, 8)
    assert z_norm(Dense.zeros(g), 4, 8, -0.5, 0.0) == 0.0


# ---------------------------------------------------------------- X^{s,r,b}

def _traj(g, K=16, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal(g.shape)
    t = np.linspace(0.0, 1.0, K)
    return Trajectory(t, [Dense(g, np.cos(3 * tk) * base) for tk in t])


def test_xsrb_zero_and_plancherel():
    g = Grid(2, 1.0, 8, 1.0, 8)
    z = Dense.zeros(g)
    assert xsrb_norm(Trajectory(np.arange(8.0), [z] * 8), 0.1, 0.1, 0.75) == 0.0
    tr = _traj(g)
    ones = lambda t: np.ones_like(t)
    for s in (0.0, 0.4):
        ref = np.sqrt(tr.dt * sum(sobolev_norm(f, s, 0.0) ** 2 for f in tr.fields))
        assert xsrb_norm(tr, s, 0.0, 0.0, window=ones) == pytest.approx(ref, rel=1e-12)


def test_xsrb_free_solution_bounded_in_b():
    # a free solution lives on tau = -eta.v, where the weight <tau + eta.v>^b is smallest
    from kdl.field import smooth_cutoff
    from kdl.solver import free_transport

    g = Grid(2, 4.0, 16, 1.0, 8)
    x, v = g.x_points(), g.v_points()
    bump = Dense(g, smooth_cutoff(np.linalg.norm(x, axis=1))[:, None] * np.exp(-np.sum(v * v, 1))[None, :])
    t = np.linspace(0.0, 1.0, 16)
    tr = Trajectory(t, [free_transport(bump, s) for s in t])
    base = xsrb_norm(tr, 0.2, 0.1, 0.0)
    vals = [xsrb_norm(tr, 0.2, 0.1, b) / base for b in (0.55, 0.75, 0.95)]
    assert 1.0 <= vals[0] <= vals[1] <= vals[2] <= 5.0


def test_xsrb_needs_samples():
    g = Grid(2, 1.0, 8, 1.0, 8)
    with pytest.raises(ValidationError):
        xsrb_norm(_traj(g, K=4), 0, 0, 0.75)


# ---------------------------------------------------------------- misc

def test_norm_spec():
    assert NormSpec.from_deflation(0.25, -0.5) == NormSpec("sobolev", s=0.25, r=0.0)
    assert NormSpec.from_deflation(0.75, -0.5).r == pytest.approx(0.25)
    with pytest.raises(ExponentError):
        NormSpec("xsrb", b=0.5)
    with pytest.raises(ValidationError):
        NormSpec("bogus")


def test_critical_indices():
    s2, w2 = critical_indices(2, -0.5)
    s3, w3 = critical_indices(3, -1.0)
    assert s2 == 0.0 and s3 == 0.5
    assert w2(0.25) == -0.25 and w3(0.5) == -0.5
    assert critical_indices(3, -1.0)[1](1.0) == 0.0
    s0, r0 = critical_indices(2, 0.0)
    assert s0 == 0.0 and r0(0.7) == 0.7
    s5, r5 = critical_indices(3, -0.5)
    assert s5 == 0.5 and r5(0.5) == 0.0
    with pytest.raises(ValidationError):
        critical_indices(4, 0.0)


def test_xsrb_weighted_oracle():
    # explicit triple sum over (tau, eta, v) with the t and x transforms done as dense DFT matrices
    g = Grid(2, 1.0, 8, 1.0, 16)
    tr = _traj(g, K=8, seed=4)
    K, nx, nv = 8, 64, 256
    w = np.ones(K)
    data = tr.stacked().reshape(K, nx, nv)
    ex = np.exp(-2j * np.pi * np.outer(np.arange(8), np.arange(8)) / 8)
    Ex = np.kron(ex, ex)                                        # x-DFT on the flattened 8 x 8 mesh
    Et = np.exp(-2j * np.pi * np.outer(np.arange(K), np.arange(K)) / K)
    spec = np.einsum("mk,nj,kjv->mnv", Et, Ex, data * w[:, None, None])
    k1 = 2 * np.pi * np.fft.fftfreq(8, d=g.h_x)
    eta = np.stack(np.meshgrid(k1, k1, indexing="ij"), -1).reshape(nx, 2)
    tau = 2 * np.pi * np.fft.fftfreq(K, d=tr.dt)
    v = g.v_points()
    s, r, b = 0.3, 0.2, 0.75
    wt = ((1 + (tau[:, None, None] + (eta @ v.T)[None]) ** 2) ** b
          * (1 + np.sum(eta ** 2, 1))[None, :, None] ** s * (1 + np.sum(v ** 2, 1))[None, None, :] ** r)
    ref = np.sqrt(np.sum(np.abs(spec) ** 2 * wt) * tr.dt * g.h_x ** 2 * g.h_v ** 2 / (K * nx))
    got = xsrb_norm(tr, s, r, b, window=lambda t: np.ones_like(t))
    assert got == pytest.approx(ref, rel=1e-10)
