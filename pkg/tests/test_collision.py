import numpy as np
import pytest
from scipy import integrate
from hypothesis import given, settings
from hypothesis import strategies as st

from kdl.collision import (
    CollisionKernel,
    collision_invariants,
    default_sphere,
    kernel_eval,
    q_gain_direct,
    q_gain_spectral,
    q_loss_direct,
    q_loss_spectral,
    sphere_quadrature,
)
from kdl.errors import GridMismatchError, SingularityError, UnsupportedError, ValidationError
from kdl.field import Dense, Grid


def gaussian_rows(grid, centers, widths, x_profile=None):
    """Dense field sum_k exp(-|v - c_k|^2 / w_k^2), optionally scaled per x-row."""
    v = grid.v_points()
    vals = np.zeros(v.shape[0])
    for c, w in zip(centers, widths):
        vals += np.exp(-np.sum((v - np.asarray(c)) ** 2, 1) / w ** 2)
    scale = np.ones(grid.n_x ** grid.d) if x_profile is None else x_profile
    return Dense(grid, scale[:, None] * vals[None, :])


# ---------------------------------------------------------------- kernel

def test_kernel_eval_examples():
    k = CollisionKernel(-0.5, "abs_cos")
    assert kernel_eval(k, [1.0, 0.0], [0.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)
    assert kernel_eval(k, [4.0, 0.0], [0.0, 0.0], [0.6, 0.8]) == pytest.approx(0.3)
    assert kernel_eval(CollisionKernel(0.0, "one"), [3.0, 1.0], [1.0, 1.0], [0.0, 1.0]) == 1.0
    comp = CollisionKernel(angular="abs_cos", variant="composite")
    assert kernel_eval(comp, [0.5, 0, 0], [0, 0, 0], [1.0, 0, 0]) == pytest.approx(0.5)
    assert kernel_eval(comp, [2.0, 0, 0], [0, 0, 0], [0.6, 0.8, 0]) == pytest.approx(0.3)


def test_kernel_regularized_diagonal():
    k = CollisionKernel(-0.5, "abs_cos", cutoff_eps=0.5)
    assert kernel_eval(k, [0.1, 0.0], [0.0, 0.0], [1.0, 0.0], h_v=0.25) == 0.0
    with pytest.raises(SingularityError):
        kernel_eval(CollisionKernel(-0.5, cutoff_eps=0.0), [0.0, 0.0], [0.0, 0.0], [1.0, 0.0])


@pytest.mark.parametrize("d,gamma,ok", [(2, -0.5, True), (2, -0.51, False), (3, -1.0, True),
                                        (3, -1.2, False), (2, 0.1, False), (2, 0.0, True)])
def test_gamma_range(d, gamma, ok):
    k = CollisionKernel(gamma)
    if ok:
        k.validate(d)
    else:
        with pytest.raises(ValidationError, match=r"-\(d-1\)/2 <= gamma <= 0"):
            k.validate(d)


def test_kernel_rejects_bad_options():
    with pytest.raises(ValidationError):
        CollisionKernel(angular="nope")
    with pytest.raises(ValidationError):
        CollisionKernel(angular=lambda c: c)        # negative on c < 0
    with pytest.raises(ValidationError):
        CollisionKernel(variant="composite").validate(2)


def test_angular_norms():
    # int_0^{2pi} |cos| = 4;  2 pi int_{-1}^{1} |z| dz = 2 pi
    assert CollisionKernel(angular="abs_cos").b_l1(2) == pytest.approx(4.0, rel=1e-10)
    assert CollisionKernel(angular="abs_cos").b_l1(3) == pytest.approx(2 * np.pi, rel=1e-10)
    assert CollisionKernel(angular="cos2").b_l1(3) == pytest.approx(4 * np.pi / 3, rel=1e-10)
    assert CollisionKernel(angular="abs_cos").grad_constant() == pytest.approx(1.0)
    assert CollisionKernel(angular="one").grad_constant() == np.inf


def test_kernel_dict_round_trip():
    k = CollisionKernel(-0.25, "cos2", cutoff_eps=0.3)
    assert CollisionKernel.from_dict(k.to_dict()) == k


# ---------------------------------------------------------------- sphere rules

def test_circle_rule():
    sq = sphere_quadrature(2, 8)
    assert sq.nodes.shape == (8, 2)
    assert np.allclose(sq.weights, 2 * np.pi / 8)
    assert len(sq.folded().weights) == 4
    assert sq.folded().weights.sum() == pytest.approx(2 * np.pi)


def test_sphere_rule_moments():
    sq = sphere_quadrature(3, 8)
    assert sq.weights.sum() == pytest.approx(4 * np.pi)
    assert np.sum(sq.weights * sq.nodes[:, 0] ** 2) == pytest.approx(4 * np.pi / 3)
    assert np.sum(sq.weights * sq.nodes[:, 2] ** 4) == pytest.approx(4 * np.pi / 5)
    assert np.allclose(sq.weights @ sq.nodes, 0.0, atol=1e-13)


# ---------------------------------------------------------------- direct forms vs oracles

def _bilinear(F, p, n):
    """Zero outside the node hull; p in grid units."""
    if np.any(p < -1e-9) or np.any(p > n - 1 + 1e-9):
        return 0.0
    p = np.clip(p, 0, n - 1)
    i0 = np.minimum(np.floor(p).astype(int), n - 2)
    t = p - i0
    return ((1 - t[0]) * (1 - t[1]) * F[i0[0], i0[1]] + (1 - t[0]) * t[1] * F[i0[0], i0[1] + 1]
            + t[0] * (1 - t[1]) * F[i0[0] + 1, i0[1]] + t[0] * t[1] * F[i0[0] + 1, i0[1] + 1])


def brute_gain(F, G, kernel, grid, sq):
    n, h, L = grid.n_v, grid.h_v, grid.L_v
    ax = grid.v_axis()
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            v = np.array([ax[i], ax[j]])
            acc = 0.0
            for a in range(n):
                for b in range(n):
                    u = np.array([ax[a], ax[b]])
                    for om, wt in zip(sq.nodes, sq.weights):
                        B = kernel_eval(kernel, u, v, om, h_v=h)
                        if B == 0:
                            continue
                        s = np.dot(u - v, om) * om
                        fv = _bilinear(F, (v + s + L) / h, n)
                        gv = _bilinear(G, (u - s + L) / h, n)
                        acc += B * fv * gv * wt * h * h
            out[i, j] = acc
    return out


def test_gain_matches_brute_force():
    grid = Grid(2, 1.0, 8, 2.0, 8)
    rng = np.random.default_rng(7)
    F = rng.random((8, 8))
    G = rng.random((8, 8))
    kernel = CollisionKernel(-0.5, "abs_cos")
    sq = sphere_quadrature(2, 8)
    f = Dense(grid, np.broadcast_to(F.ravel(), (64, 64)))
    g = Dense(grid, np.broadcast_to(G.ravel(), (64, 64)))
    got = q_gain_direct(f, g, kernel, grid, sq).flat()[0].reshape(8, 8)
    ref = brute_gain(F, G, kernel, grid, sq)
    assert np.max(np.abs(got - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_loss_constant_kernel_oracle():
    # gamma = 0, b = 1, no diagonal cut: Q-(f, g) = f * 2 pi * sum_u g(u) h^2
    grid = Grid(2, 1.0, 8, 2.0, 16)
    kernel = CollisionKernel(0.0, "one", cutoff_eps=0.0)
    f = gaussian_rows(grid, [(0.2, 0.0)], [0.5])
    g = gaussian_rows(grid, [(-0.3, 0.4)], [0.6], x_profile=np.linspace(0.5, 1.5, 64))
    mass = g.flat().sum(axis=1) * grid.h_v ** 2
    ref = f.flat() * 2 * np.pi * mass[:, None]
    got = q_loss_direct(f, g, kernel, grid).flat()
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-14)
    spec = q_loss_spectral(f, g, kernel, grid).flat()
    assert np.allclose(spec, ref, rtol=1e-12, atol=1e-14)


def test_loss_weight_oracle():
    # single occupied partner node: Q-(f, g)(v) = f(v) g(u0) h^2 |u0 - v|^gamma sum_w b(cos) w_k
    grid = Grid(2, 1.0, 8, 2.0, 8)
    kernel = CollisionKernel(-0.5, "abs_cos")
    sq = default_sphere(2)
    G = np.zeros((8, 8))
    G[5, 2] = 3.0
    F = np.ones((8, 8))
    ax = grid.v_axis()
    u0 = np.array([ax[5], ax[2]])
    ref = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            w = u0 - np.array([ax[i], ax[j]])
            r = np.linalg.norm(w)
            if r == 0:
                continue
            ref[i, j] = 3.0 * grid.h_v ** 2 * r ** -0.5 * np.sum(np.abs(sq.nodes @ w / r) * sq.weights)
    f = Dense(grid, np.broadcast_to(F.ravel(), (64, 64)))
    g = Dense(grid, np.broadcast_to(G.ravel(), (64, 64)))
    got = q_loss_direct(f, g, kernel, grid, sq).flat()[0].reshape(8, 8)
    assert np.allclose(got, ref, rtol=1e-12)


# ---------------------------------------------------------------- properties

@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10 ** 6))
@settings(max_examples=10, deadline=None)
def test_bilinearity(a, b, seed):
    grid = Grid(2, 1.0, 8, 2.0, 8)
    rng = np.random.default_rng(seed)
    f, g, h = (Dense(grid, rng.random(grid.shape)) for _ in range(3))
    kern = CollisionKernel(-0.5)
    for op in (q_gain_direct, q_loss_direct):
        lhs = op(a * f + b * g, h, kern, grid).values
        rhs = a * op(f, h, kern, grid).values + b * op(g, h, kern, grid).values
        assert np.allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))
        lhs = op(h, a * f + b * g, kern, grid).values
        rhs = a * op(h, f, kern, grid).values + b * op(h, g, kern, grid).values
        assert np.allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))


@given(st.integers(0, 10 ** 6))
@settings(max_examples=10, deadline=None)
def test_positivity(seed):
    grid = Grid(2, 1.0, 8, 2.0, 8)
    rng = np.random.default_rng(seed)
    f, g = (Dense(grid, rng.random(grid.shape)) for _ in range(2))
    kern = CollisionKernel(-0.5)
    assert q_gain_direct(f, g, kern, grid).values.min() >= 0.0
    assert q_loss_direct(f, g, kern, grid).values.min() >= 0.0


def test_gain_of_isotropic_pair_is_swap_symmetric():
    grid = Grid(2, 1.0, 8, 3.0, 32)
    c = -0.5 * grid.h_v                  # the node set is symmetric about -h/2
    m = gaussian_rows(grid, [(c, c)], [1.0])
    out = q_gain_direct(m, m, CollisionKernel(-0.5), grid).flat()[0].reshape(32, 32)
    assert np.allclose(out, out.T, atol=1e-13 * out.max())


def test_gain_support_growth():
    # energy conservation: |v|^2 <= |v*|^2 + |u*|^2 <= 2 R^2 plus one interpolation cell
    grid = Grid(2, 1.0, 8, 4.0, 32)
    v = grid.v_points()
    R = 1.5
    vals = np.where(np.linalg.norm(v, axis=1) <= R, 1.0, 0.0)
    f = Dense(grid, np.broadcast_to(vals, (64, vals.size)))
    out = q_gain_direct(f, f, CollisionKernel(-0.5), grid).flat()[0]
    bound = np.sqrt(2.0) * (R + np.sqrt(2.0) * grid.h_v)
    assert np.all(out[np.linalg.norm(v, axis=1) > bound] == 0.0)
    assert out.max() > 0


def test_x_is_a_parameter():
    grid = Grid(2, 1.0, 8, 2.0, 16)
    prof = np.linspace(0.0, 2.0, 64)
    f = gaussian_rows(grid, [(0.0, 0.0)], [0.6], x_profile=prof)
    g = gaussian_rows(grid, [(0.5, 0.0)], [0.5])
    base = q_gain_direct(gaussian_rows(grid, [(0.0, 0.0)], [0.6]), g, CollisionKernel(-0.5), grid).flat()[0]
    out = q_gain_direct(f, g, CollisionKernel(-0.5), grid).flat()
    assert np.allclose(out, prof[:, None] * base[None, :], atol=1e-14)


def test_spectral_gamma_zero_unsupported():
    grid = Grid(2, 1.0, 8, 2.0, 8)
    f = Dense(grid, np.ones(grid.shape))
    with pytest.raises(UnsupportedError):
        q_gain_spectral(f, f, CollisionKernel(0.0), grid)


def test_grid_mismatch():
    g1 = Grid(2, 1.0, 8, 2.0, 8)
    g2 = Grid(2, 1.0, 8, 2.0, 16)
    with pytest.raises(GridMismatchError):
        q_loss_direct(Dense.zeros(g1), Dense.zeros(g1), CollisionKernel(), g2)


def test_zero_factor_gives_zero():
    grid = Grid(2, 1.0, 8, 2.0, 8)
    f = Dense(grid, np.random.default_rng(0).random(grid.shape))
    z = Dense.zeros(grid)
    assert not q_gain_direct(f, z, CollisionKernel(), grid).values.any()
    assert not q_loss_direct(z, f, CollisionKernel(), grid).values.any()


def test_invariants_small_for_centered_maxwellian():
    grid = Grid(2, 1.0, 8, 4.0, 32)
    c = -0.5 * grid.h_v
    m = gaussian_rows(grid, [(c, c)], [np.sqrt(2.0)])
    mass, mom, en = collision_invariants(m, CollisionKernel(-0.5), grid)
    assert mass <= 1e-2 and mom <= 1e-2 and en <= 5e-2


def test_self_cell_weight_and_balance():
    # the zeroed diagonal cell contributes ||b||_1 h^{d+gamma} int_{[-1/2,1/2]^2} |w|^gamma dw
    grid = Grid(2, 1.0, 8, 2.0, 16)
    plain = CollisionKernel(-0.5)
    cell = CollisionKernel(-0.5, self_cell=True)
    unit, _ = integrate.quad(lambda th: 8.0 / 1.5 * (0.5 / np.cos(th)) ** 1.5, 0.0, np.pi / 4)
    weight = 4.0 * grid.h_v ** 1.5 * unit
    rng = np.random.default_rng(5)
    f = Dense(grid, rng.random(grid.shape))
    g = Dense(grid, rng.random(grid.shape))
    fg = f.values * g.values
    for op in (q_gain_direct, q_loss_direct):
        gap = op(f, g, cell, grid).values - op(f, g, plain, grid).values
        assert np.allclose(gap, weight * fg, rtol=1e-8, atol=0)
    # Q = Q+ - Q- is unchanged, so balance and conservation are too
    qa = q_gain_direct(f, g, cell, grid).values - q_loss_direct(f, g, cell, grid).values
    qb = q_gain_direct(f, g, plain, grid).values - q_loss_direct(f, g, plain, grid).values
    assert np.allclose(qa, qb, atol=1e-12)
    assert CollisionKernel.from_dict(cell.to_dict()) == cell


def _x_const(grid, vals):
    return Dense(grid, np.broadcast_to(vals, (grid.n_x ** grid.d, vals.size)))


def test_loss_of_unit_disc_at_origin():
    # int_{|u|<=1} |u|^{-1/2} du = 4 pi / 3 and int_{S^1} |cos| = 4; the lattice sum converges to it
    errs = []
    for n in (32, 64, 128):
        grid = Grid(2, 1.0, 8, 2.0, n)
        v = grid.v_points()
        disc = _x_const(grid, (np.linalg.norm(v, axis=1) <= 1.0).astype(float))
        out = q_loss_direct(_x_const(grid, np.ones(v.shape[0])), disc, CollisionKernel(-0.5), grid).flat()[0]
        origin = int(np.argmin(np.linalg.norm(v, axis=1)))
        assert np.all(v[origin] == 0.0)
        errs.append(abs(out[origin] / (16.0 * np.pi / 3.0) - 1.0))
    assert errs[0] > errs[1] > errs[2] and errs[2] <= 1e-2


def test_maxwellian_detailed_balance():
    grid = Grid(2, 1.0, 8, 4.0, 32)
    v = grid.v_points()
    m = _x_const(grid, np.exp(-np.sum(v * v, axis=1)))
    k = CollisionKernel(-0.5)
    gain = q_gain_direct(m, m, k, grid).flat()[0]
    loss = q_loss_direct(m, m, k, grid).flat()[0]
    assert np.max(np.abs(gain - loss)) <= 2e-2 * np.max(gain)
    assert collision_invariants(Dense.zeros(grid), k, grid) == (0.0, 0.0, 0.0)


def _smooth_pair(grid, rng):
    v = grid.v_points()
    bump = lambda: np.exp(-np.sum((v - rng.uniform(-1, 1, 2)) ** 2, 1) / rng.uniform(0.6, 1.2) ** 2)
    return _x_const(grid, bump()), _x_const(grid, bump())


def test_spectral_gain_matches_direct():
    grid = Grid(2, 1.0, 8, 4.0, 32)
    rng = np.random.default_rng(11)
    k = CollisionKernel(-0.5, self_cell=True)
    for _ in range(2):
        f, g = _smooth_pair(grid, rng)
        d = q_gain_direct(f, g, k, grid).flat()[0]
        s = q_gain_spectral(f, g, k, grid).flat()[0]
        assert np.linalg.norm(d - s) <= 5e-2 * np.linalg.norm(d)


def test_spectral_gain_rotation_equivariant():
    # radial data about the grid's centre of symmetry: output invariant under 90 degree turns
    grid = Grid(2, 1.0, 8, 3.0, 32)
    v = grid.v_points() + grid.h_v / 2
    f = _x_const(grid, np.exp(-np.sum(v * v, 1)))
    g = _x_const(grid, np.exp(-2.0 * np.sum(v * v, 1)))
    out = q_gain_spectral(f, g, CollisionKernel(-0.5), grid).flat()[0].reshape(32, 32)
    assert np.max(np.abs(out - np.rot90(out))) <= 1e-5 * out.max()


def test_spectral_loss():
    grid = Grid(2, 1.0, 8, 3.0, 64)
    v = grid.v_points()
    f = _x_const(grid, np.exp(-np.sum(v * v, 1)))
    disc = _x_const(grid, (np.linalg.norm(v, axis=1) <= 1.0).astype(float))
    # gamma = 0: f * |disc| * ||b||_1 with |disc| = pi
    out = q_loss_spectral(f, disc, CollisionKernel(0.0), grid).flat()[0]
    assert np.allclose(out, f.flat()[0] * np.pi * 4.0, rtol=5e-3)
    grid = Grid(2, 1.0, 8, 4.0, 32)
    rng = np.random.default_rng(3)
    for _ in range(3):
        a, b = _smooth_pair(grid, rng)
        d = q_loss_direct(a, b, CollisionKernel(-0.5), grid).flat()[0]
        s = q_loss_spectral(a, b, CollisionKernel(-0.5), grid).flat()[0]
        assert np.linalg.norm(d - s) <= 5e-2 * np.linalg.norm(d)
