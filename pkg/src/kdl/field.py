"""
Phase-space grids and field representations.

A field f(x, v) lives either on a uniform periodic box (``Dense``) or as a
lazily evaluated function with a declared support box (``Analytic``).
Dense values are stored x-major: array axes are (x_1..x_d, v_1..v_d).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .errors import (
    GridError,
    GridMismatchError,
    RepresentationError,
    ShapeError,
    SymbolError,
    ValidationError,
)

MAGIC = b"KDF1"
_AXES = ("x", "v", "t")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform phase-space grid; nodes sit at -L + i*h, h = 2L/n."""

    d: int
    L_x: float
    n_x: int
    L_v: float
    n_v: int

    def __post_init__(self):
        if self.d not in (2, 3):
            raise GridError(f"dimension must be 2 or 3, got {self.d}")
        for name in ("n_x", "n_v"):
            n = getattr(self, name)
            if int(n) != n or not _is_pow2(int(n)) or n < 8:
                raise GridError(f"{name} must be a power of two >= 8, got {n}")
        for name in ("L_x", "L_v"):
            L = getattr(self, name)
            if not (np.isfinite(L) and L > 0):
                raise GridError(f"{name} must be positive, got {L}")

    @property
    def h_x(self) -> float:
        return 2.0 * self.L_x / self.n_x

    @property
    def h_v(self) -> float:
        return 2.0 * self.L_v / self.n_v

    @property
    def shape(self) -> tuple:
        return (self.n_x,) * self.d + (self.n_v,) * self.d

    @property
    def cell_volume(self) -> float:
        return (self.h_x * self.h_v) ** self.d

    def x_axis(self) -> np.ndarray:
        return -self.L_x + self.h_x * np.arange(self.n_x)

    def v_axis(self) -> np.ndarray:
        return -self.L_v + self.h_v * np.arange(self.n_v)

    def x_points(self) -> np.ndarray:
        """All x-nodes as an (n_x**d, d) array in C order."""
        return _mesh_points(self.x_axis(), self.d)

    def v_points(self) -> np.ndarray:
        return _mesh_points(self.v_axis(), self.d)

    def x_freqs(self) -> np.ndarray:
        return 2.0 * np.pi * sfft.fftfreq(self.n_x, d=self.h_x)

    def v_freqs(self) -> np.ndarray:
        return 2.0 * np.pi * sfft.fftfreq(self.n_v, d=self.h_v)

    def to_dict(self) -> dict:
        return {"d": self.d, "L_x": self.L_x, "n_x": self.n_x,
                "L_v": self.L_v, "n_v": self.n_v}


def _mesh_points(axis: np.ndarray, d: int) -> np.ndarray:
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class Box:
    """Axis-aligned support box in (x, v)."""

    x_lo: np.ndarray
    x_hi: np.ndarray
    v_lo: np.ndarray
    v_hi: np.ndarray

    @classmethod
    def symmetric(cls, d: int, rx: float, rv: float) -> "Box":
        return cls(-rx * np.ones(d), rx * np.ones(d), -rv * np.ones(d), rv * np.ones(d))

    @property
    def d(self) -> int:
        return len(self.x_lo)

    def contains(self, x, v) -> np.ndarray:
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        inx = np.all((x >= self.x_lo) & (x <= self.x_hi), axis=-1)
        inv = np.all((v >= self.v_lo) & (v <= self.v_hi), axis=-1)
        return inx & inv

    def union(self, other: "Box") -> "Box":
        return Box(np.minimum(self.x_lo, other.x_lo), np.maximum(self.x_hi, other.x_hi),
                   np.minimum(self.v_lo, other.v_lo), np.maximum(self.v_hi, other.v_hi))

    def transported(self, t: float) -> "Box":
        """Smallest box holding {(x + v t, v)} for (x, v) in self."""
        a = self.v_lo * t
        b = self.v_hi * t
        return Box(self.x_lo + np.minimum(a, b), self.x_hi + np.maximum(a, b),
                   self.v_lo.copy(), self.v_hi.copy())


class PhaseField:
    """Common base of Dense and Analytic fields."""

    d: int

    def __call__(self, x, v):
        return interpolate(self, x, v)


class Dense(PhaseField):
    """Field sampled on every node of a Grid."""

    def __init__(self, grid: Grid, values):
        values = np.array(values, dtype=float)
        if values.shape != grid.shape:
            if values.size == int(np.prod(grid.shape)):
                values = values.reshape(grid.shape)
            else:
                raise ShapeError(f"values shape {values.shape} does not match grid {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("Dense values must be finite")
        self.grid = grid
        self.values = values
        self.values.setflags(write=False)

    @property
    def d(self) -> int:
        return self.grid.d

    def __add__(self, other):
        _same_grid(self, other)
        return Dense(self.grid, self.values + other.values)

    def __sub__(self, other):
        _same_grid(self, other)
        return Dense(self.grid, self.values - other.values)

    def __mul__(self, a):
        return Dense(self.grid, self.values * float(a))

    __rmul__ = __mul__

    def __neg__(self):
        return Dense(self.grid, -self.values)

    def flat(self) -> np.ndarray:
        """Values as an (n_x**d, n_v**d) matrix."""
        g = self.grid
        return self.values.reshape(g.n_x ** g.d, g.n_v ** g.d)

    @classmethod
    def zeros(cls, grid: Grid) -> "Dense":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable) -> "Dense":
        """Sample fn(x, v) (broadcasting over trailing coordinate axes) at all nodes."""
        x = grid.x_points()[:, None, :]
        v = grid.v_points()[None, :, :]
        return cls(grid, np.asarray(fn(x, v), float) * np.ones((x.shape[0], v.shape[1])))


class Analytic(PhaseField):
    """Lazily evaluated field with a declared support box.

    ``evaluator(x, v)`` takes broadcastable arrays whose last axis holds the
    d coordinates and returns values of the broadcast shape without it.
    ``grad_x`` optionally returns the x-gradient with a trailing axis of size d.
    ``plan`` optionally tells the norm routines how to integrate the field
    (a Grid to sample on, or an object with ``sobolev`` / ``profile`` methods).
    """

    def __init__(self, evaluator: Callable, support: Box, grad_x: Callable | None = None,
                 plan=None):
        self.evaluator = evaluator
        self.support = support
        self.grad_x = grad_x
        self.plan = plan

    @property
    def d(self) -> int:
        return self.support.d

    def evaluate(self, x, v) -> np.ndarray:
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        out = np.asarray(self.evaluator(x, v), float)
        return np.where(self.support.contains(x, v), out, 0.0)

    def sample(self, grid: Grid, chunk: int = 256) -> Dense:
        """Materialize on a grid, evaluating x-rows in chunks."""
        if grid.d != self.d:
            raise GridMismatchError("dimension mismatch")
        xs = grid.x_points()
        vs = grid.v_points()
        out = np.zeros((xs.shape[0], vs.shape[0]))
        vin = np.all((vs >= self.support.v_lo) & (vs <= self.support.v_hi), axis=-1)
        xin = np.all((xs >= self.support.x_lo) & (xs <= self.support.x_hi), axis=-1)
        vi = np.flatnonzero(vin)
        xi = np.flatnonzero(xin)
        if vi.size and xi.size:
            vsel = vs[vi][None, :, :]
            for s in range(0, xi.size, chunk):
                rows = xi[s:s + chunk]
                out[np.ix_(rows, vi)] = self.evaluate(xs[rows][:, None, :], vsel)
        return Dense(grid, out)


def _same_grid(a: Dense, b: Dense):
    if not isinstance(b, Dense) or a.grid != b.grid:
        raise GridMismatchError("fields live on different grids")


@dataclass
class Trajectory:
    """Time-sampled Dense fields on a uniform mesh."""

    times: np.ndarray
    fields: list
    grid: Grid = dc_field(default=None)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        if len(self.fields) != self.times.size:
            raise ShapeError("one field per time required")
        if self.grid is None and self.fields:
            self.grid = self.fields[0].grid
        for f in self.fields:
            if not isinstance(f, Dense) or f.grid != self.grid:
                raise GridMismatchError("trajectory fields must share one Dense grid")
        if self.times.size > 1:
            dt = np.diff(self.times)
            if np.any(dt <= 0):
                raise ValidationError("times must be strictly increasing")
            if np.ptp(dt) > 1e-9 * max(abs(dt[0]), 1e-300):
                raise ValidationError("times must form a uniform mesh")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def stacked(self) -> np.ndarray:
        return np.stack([f.values for f in self.fields])

    def __len__(self):
        return self.times.size


@dataclass
class SpectralField:
    """Complex spectrum over the transformed axes of a field or trajectory."""

    values: np.ndarray
    axes: tuple
    grid: Grid
    times: np.ndarray | None = None

    def freqs(self, axis: str) -> np.ndarray:
        if axis == "x":
            return self.grid.x_freqs()
        if axis == "v":
            return self.grid.v_freqs()
        if axis == "t":
            t = self.times
            return 2.0 * np.pi * sfft.fftfreq(t.size, d=t[1] - t[0])
        raise ShapeError(f"unknown axis {axis}")


def smooth_cutoff(x) -> np.ndarray:
    """chi(x) = psi(|x|); the last axis of ``x`` holds the coordinates.

    A 0-d or 1-d input is treated as a list of scalar points.
    """
    x = np.asarray(x, float)
    if x.ndim <= 1:
        r = np.abs(x)
    else:
        r = np.sqrt(np.sum(x * x, axis=-1))
    return cutoff_profile(r)


def _g(s):
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)


def cutoff_profile(t) -> np.ndarray:
    """Radial profile psi: 1 on [0,1], 0 on [2,inf), bump quotient between."""
    t = np.asarray(t, float)
    a = _g(2.0 - t)
    b = _g(t - 1.0)
    den = a + b
    mid = np.divide(a, den, out=np.zeros_like(den), where=den > 0)
    return np.where(t <= 1.0, 1.0, np.where(t >= 2.0, 0.0, mid))


def cutoff_profile_deriv(t) -> np.ndarray:
    """psi'(t), supported on (1, 2)."""
    t = np.asarray(t, float)
    s1 = 2.0 - t
    s2 = t - 1.0
    inside = (s1 > 0) & (s2 > 0)
    s1 = np.where(inside, s1, 1.0)
    s2 = np.where(inside, s2, 1.0)
    a, b = _g(s1), _g(s2)
    da, db = a / s1 ** 2, b / s2 ** 2
    val = -(da * b + a * db) / (a + b) ** 2
    return np.where(inside, val, 0.0)


def _axis_indices(axes: Sequence[str], d: int, offset: int) -> list:
    idx = []
    for a in axes:
        if a == "x":
            idx += [offset + i for i in range(d)]
        elif a == "v":
            idx += [offset + d + i for i in range(d)]
        elif a == "t":
            idx.append(0)
        else:
            raise ShapeError(f"unknown axis {a!r}")
    return idx


def _normalize_axes(axes) -> tuple:
    if isinstance(axes, str):
        axes = (axes,) if axes in _AXES else tuple(axes)
    axes = tuple(dict.fromkeys(axes))
    for a in axes:
        if a not in _AXES:
            raise ShapeError(f"unknown axis {a!r}")
    return tuple(a for a in _AXES if a in axes)


def transform(f, axes, direction: str = "forward"):
    """Unnormalized forward / normalized inverse DFT along the named axes."""
    axes = _normalize_axes(axes)
    if direction == "forward":
        if isinstance(f, Trajectory):
            data, grid, times, off = f.stacked(), f.grid, f.times, 1
        elif isinstance(f, Dense):
            if "t" in axes:
                raise ShapeError("axis t needs a Trajectory")
            data, grid, times, off = f.values, f.grid, None, 0
        else:
            raise RepresentationError("transform needs a Dense field or Trajectory")
        spec = sfft.fftn(data, axes=_axis_indices(axes, grid.d, off))
        return SpectralField(spec, axes, grid, times)
    if direction == "inverse":
        if not isinstance(f, SpectralField):
            raise RepresentationError("inverse transform needs a SpectralField")
        off = 1 if f.times is not None else 0
        if not set(axes) <= set(f.axes):
            raise ShapeError("inverse axes must have been transformed")
        out = sfft.ifftn(f.values, axes=_axis_indices(axes, f.grid.d, off))
        rest = tuple(a for a in f.axes if a not in axes)
        if rest:
            return SpectralField(out, rest, f.grid, f.times)
        real = out.real
        if f.times is not None:
            return Trajectory(f.times, [Dense(f.grid, r) for r in real], f.grid)
        return Dense(f.grid, real)
    raise ValueError(f"direction must be forward or inverse, got {direction!r}")


def fourier_multiplier(f: Dense, axes, symbol: Callable) -> Dense:
    """Apply symbol(k) in frequency space along the named axes."""
    if not isinstance(f, Dense):
        raise RepresentationError("fourier_multiplier needs a Dense field")
    axes = _normalize_axes(axes)
    if "t" in axes:
        raise ShapeError("time axis not available on a single field")
    k = frequency_mesh(f.grid, axes)
    m = np.asarray(symbol(k))
    if not np.all(np.isfinite(m)):
        raise SymbolError("symbol is not finite on the grid frequencies")
    idx = _axis_indices(axes, f.grid.d, 0)
    spec = sfft.fftn(f.values, axes=idx)
    spec *= m
    return Dense(f.grid, sfft.ifftn(spec, axes=idx).real)


def frequency_mesh(grid: Grid, axes) -> np.ndarray:
    """Frequency vectors 2*pi*k/(2L) on the named axes.

    Shape is the field shape with singleton dims on untouched axes, plus a
    trailing axis holding the transformed coordinates.
    """
    axes = _normalize_axes(axes)
    d = grid.d
    comps = []
    for a in axes:
        k = grid.x_freqs() if a == "x" else grid.v_freqs()
        start = 0 if a == "x" else d
        for i in range(d):
            shape = [1] * (2 * d)
            shape[start + i] = k.size
            comps.append(k.reshape(shape))
    b = np.broadcast_arrays(*comps)
    return np.stack(b, axis=-1)


def interpolate(f: PhaseField, x, v) -> np.ndarray:
    """Multilinear interpolation (Dense) or evaluator call (Analytic).

    Points outside the node hull of a Dense grid give 0.
    """
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    if isinstance(f, Analytic):
        return f.evaluate(x, v)
    if not isinstance(f, Dense):
        raise RepresentationError("unknown field representation")
    g = f.grid
    x, v = np.broadcast_arrays(x, v)
    shape = x.shape[:-1]
    cx = (x.reshape(-1, g.d) + g.L_x) / g.h_x
    cv = (v.reshape(-1, g.d) + g.L_v) / g.h_v
    coords = np.concatenate([cx, cv], axis=1).T
    out = ndimage.map_coordinates(f.values, coords, order=1, mode="grid-constant", cval=0.0)
    hi = np.array([g.n_x - 1] * g.d + [g.n_v - 1] * g.d)[:, None]
    tol = 1e-9
    inside = np.all((coords >= -tol) & (coords <= hi + tol), axis=0)
    return np.where(inside, out, 0.0).reshape(shape)


def save_dense(path, f: Dense) -> None:
    """Write the KDF1 binary container."""
    g = f.grid
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<qqqdd", g.d, g.n_x, g.n_v, g.L_x, g.L_v))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_dense(path) -> Dense:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValidationError("not a KDF1 file")
        d, n_x, n_v, L_x, L_v = struct.unpack("<qqqdd", fh.read(40))
        grid = Grid(int(d), float(L_x), int(n_x), float(L_v), int(n_v))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return Dense(grid, data.reshape(grid.shape).astype(float))


def assert_support_margin(f: Dense, cells: int = 2, tol: float = 0.0) -> None:
    """Check that values vanish within ``cells`` nodes of every box face."""
    from .errors import WraparoundError

    vals = np.abs(f.values)
    scale = vals.max() if vals.size else 0.0
    for ax in range(vals.ndim):
        n = vals.shape[ax]
        edge = np.concatenate([np.arange(cells), np.arange(n - cells, n)])
        if np.take(vals, edge, axis=ax).max(initial=0.0) > tol * scale:
            raise WraparoundError(f"support reaches within {cells} cells of the boundary on axis {ax}")
