"""Grids, field containers and the discrete differential operators.

Scalars live at cell centres.  Vector components are staggered: component
``a`` at index ``i`` sits on the face between cell ``i`` and cell ``i + e_a``
(a MAC layout), so every component array has the same shape as a scalar
array.  In box-neumann mode the last face along the component's own axis is
the boundary face and is held at zero (no penetration).

All operators are built from two one-dimensional primitives, the forward
difference ``fwd`` (cells to faces) and the face average ``c2f``, together
with their exact transposes.  Divergence is defined as ``-fwd^T`` and the
Laplacian as divergence of the gradient, so the discrete duality and symmetry
identities hold to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import scipy.fft


class BCMode(str, Enum):
    PERIODIC = "periodic"
    BOX_NEUMANN = "box-neumann"


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Rectangular cell-centred grid in one or two dimensions."""

    n: tuple[int, ...]
    length: tuple[float, ...]
    bc_mode: BCMode = BCMode.PERIODIC
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = tuple(int(k) for k in np.atleast_1d(self.n))
        length = tuple(float(x) for x in np.atleast_1d(self.length))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "length", length)
        object.__setattr__(self, "bc_mode", BCMode(self.bc_mode))
        if len(n) not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {len(n)}")
        if len(length) != len(n):
            raise ValueError("n and length must have the same number of axes")
        if any(k < 4 for k in n):
            raise ValueError(f"every axis needs at least 4 cells, got n={n}")
        if any(not (x > 0 and math.isfinite(x)) for x in length):
            raise ValueError(f"domain lengths must be positive, got {length}")

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (self.n, self.length, self.bc_mode) == (other.n, other.length, other.bc_mode)

    def __hash__(self):
        return hash((self.n, self.length, self.bc_mode))

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return math.prod(self.n)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(L / k for L, k in zip(self.length, self.n))

    @property
    def cell_volume(self) -> float:
        return math.prod(self.h)

    @property
    def volume(self) -> float:
        return math.prod(self.length)

    @property
    def periodic(self) -> bool:
        return self.bc_mode is BCMode.PERIODIC

    # -- coordinates -------------------------------------------------------

    def cell_coords(self) -> tuple[np.ndarray, ...]:
        axes = [(np.arange(k) + 0.5) * hk for k, hk in zip(self.n, self.h)]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def face_coords(self, axis: int) -> tuple[np.ndarray, ...]:
        """Coordinates of the faces carrying vector component ``axis``."""
        axes = []
        for a, (k, hk) in enumerate(zip(self.n, self.h)):
            offset = 1.0 if a == axis else 0.5
            axes.append((np.arange(k) + offset) * hk)
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def face_mask(self, axis: int) -> np.ndarray:
        """1.0 on active faces of component ``axis``, 0.0 on boundary faces."""
        key = ("mask", axis)
        if key not in self._cache:
            mask = np.ones(self.n)
            if not self.periodic:
                idx = [slice(None)] * self.dim
                idx[axis] = -1
                mask[tuple(idx)] = 0.0
            mask.setflags(write=False)
            self._cache[key] = mask
        return self._cache[key]

    def velocity_mask(self) -> np.ndarray:
        return np.stack([self.face_mask(a) for a in range(self.dim)])

    # -- 1D primitives -------------------------------------------------------

    def _shift_down(self, g, axis):
        # out[i] = g[i-1]; zero fill at i=0 in box mode
        if self.periodic:
            return np.roll(g, 1, axis=axis)
        out = np.zeros_like(g)
        src = [slice(None)] * g.ndim
        dst = [slice(None)] * g.ndim
        src[axis] = slice(0, -1)
        dst[axis] = slice(1, None)
        out[tuple(dst)] = g[tuple(src)]
        return out

    def _shift_up(self, f, axis):
        # out[i] = f[i+1]; the last entry is masked by the callers in box mode
        if self.periodic:
            return np.roll(f, -1, axis=axis)
        out = np.empty_like(f)
        src = [slice(None)] * f.ndim
        dst = [slice(None)] * f.ndim
        src[axis] = slice(1, None)
        dst[axis] = slice(0, -1)
        out[tuple(dst)] = f[tuple(src)]
        last = [slice(None)] * f.ndim
        last[axis] = -1
        out[tuple(last)] = f[tuple(last)]
        return out

    def _mask_along(self, g, axis):
        if self.periodic:
            return g
        return g * self.face_mask(axis)

    def fwd(self, f: np.ndarray, axis: int) -> np.ndarray:
        """Forward difference along ``axis`` (cell values to face values)."""
        return self._mask_along((self._shift_up(f, axis) - f) / self.h[axis], axis)

    def fwd_T(self, g: np.ndarray, axis: int) -> np.ndarray:
        """Exact transpose of :meth:`fwd` (face values to cell values)."""
        g = self._mask_along(g, axis)
        return (self._shift_down(g, axis) - g) / self.h[axis]

    def c2f(self, c: np.ndarray, axis: int) -> np.ndarray:
        """Average of the two cells adjacent to each face."""
        return self._mask_along(0.5 * (c + self._shift_up(c, axis)), axis)

    def c2f_T(self, g: np.ndarray, axis: int) -> np.ndarray:
        """Transpose of :meth:`c2f`; averages faces back to cells."""
        g = self._mask_along(g, axis)
        return 0.5 * (g + self._shift_down(g, axis))

    # -- composite operators on raw arrays ----------------------------------

    def grad(self, f: np.ndarray) -> np.ndarray:
        return np.stack([self.fwd(f, a) for a in range(self.dim)])

    def div(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n)
        for a in range(self.dim):
            out -= self.fwd_T(v[a], a)
        return out

    def lap(self, f: np.ndarray) -> np.ndarray:
        return self.div(self.grad(f))

    def vec_grad(self, v: np.ndarray) -> np.ndarray:
        """Entries ``out[a, b] = d_b v_a``; diagonal at cells, off-diagonal at corners."""
        d = self.dim
        v = v * self.velocity_mask()
        out = np.empty((d, d) + self.n)
        for a in range(d):
            for b in range(d):
                out[a, b] = -self.fwd_T(v[a], a) if a == b else self.fwd(v[a], b)
        return out

    def sym_grad(self, v: np.ndarray) -> np.ndarray:
        g = self.vec_grad(v)
        return 0.5 * (g + np.swapaxes(g, 0, 1))

    def sym_grad_T(self, s: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`sym_grad` with respect to the plain Euclidean sum."""
        d = self.dim
        out = np.zeros((d,) + self.n)
        for a in range(d):
            for b in range(d):
                if a == b:
                    out[a] -= self.fwd(s[a, a], a)
                else:
                    sab = 0.5 * (s[a, b] + s[b, a])
                    out[a] += self.fwd_T(sab, b)
        return out * self.velocity_mask()

    # -- spectral solves -----------------------------------------------------

    def _neg_lap_symbol(self) -> np.ndarray:
        key = "neglap"
        if key not in self._cache:
            parts = []
            for k, hk in zip(self.n, self.h):
                j = np.arange(k)
                if self.periodic:
                    lam = (2.0 / hk**2) * (1.0 - np.cos(2.0 * np.pi * j / k))
                else:
                    lam = (2.0 / hk**2) * (1.0 - np.cos(np.pi * j / k))
                parts.append(lam)
            grids = np.meshgrid(*parts, indexing="ij")
            sym = sum(grids)
            if self.periodic:
                # rfftn keeps the first half of the last axis
                sym = sym[..., : self.n[-1] // 2 + 1]
            sym = np.ascontiguousarray(sym)
            sym.setflags(write=False)
            self._cache[key] = sym
        return self._cache[key]

    def neg_lap_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``-lap`` in the transform basis used by :meth:`solve_poly`."""
        return self._neg_lap_symbol()

    def solve_poly(self, rhs: np.ndarray, coeffs: Sequence[float]) -> np.ndarray:
        """Solve ``sum_k coeffs[k] (-lap)^k x = rhs`` exactly.

        Periodic grids are diagonalised by the real FFT, box grids by the
        orthonormal DCT-II; both are exact for the compact Laplacian.
        """
        lam = self._neg_lap_symbol()
        symbol = np.zeros_like(lam)
        for k, c in enumerate(coeffs):
            symbol = symbol + c * lam**k
        if np.any(symbol == 0.0):
            raise ZeroDivisionError("operator symbol vanishes; system is singular")
        if self.periodic:
            xh = scipy.fft.rfftn(rhs)
            return scipy.fft.irfftn(xh / symbol, s=self.n)
        xh = scipy.fft.dctn(rhs, type=2, norm="ortho")
        return scipy.fft.idctn(xh / symbol, type=2, norm="ortho")


@dataclass(frozen=True)
class TimeGrid:
    t_final: float
    steps: int

    def __post_init__(self):
        if not (self.t_final > 0 and math.isfinite(self.t_final)):
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def tau(self) -> float:
        return self.t_final / self.steps

    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.tau

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.tau)
        w[0] = w[-1] = 0.5 * self.tau
        return w


# -- field containers ----------------------------------------------------------


def _check_finite(data, what):
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite entries")


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} values, got {data.size}")
        data = data.reshape(self.grid.n)
        _check_finite(data, "ScalarField")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_function(cls, grid: Grid, func) -> "ScalarField":
        return cls(grid, func(*grid.cell_coords()))

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.n, float(value)))


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: Grid
    components: tuple[np.ndarray, ...]

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float).reshape(self.grid.n) for c in self.components)
        if len(comps) != self.grid.dim:
            raise ValueError(f"expected {self.grid.dim} components, got {len(comps)}")
        for c in comps:
            _check_finite(c, "VectorField")
        object.__setattr__(self, "components", comps)

    @property
    def data(self) -> np.ndarray:
        return np.stack(self.components)

    @classmethod
    def from_array(cls, grid: Grid, arr: np.ndarray) -> "VectorField":
        return cls(grid, tuple(arr))

    @classmethod
    def from_functions(cls, grid: Grid, funcs) -> "VectorField":
        """Sample one callable per component at that component's face positions."""
        comps = [fn(*grid.face_coords(a)) * grid.face_mask(a) for a, fn in enumerate(funcs)]
        return cls(grid, tuple(np.broadcast_to(c, grid.n) for c in comps))


def _same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError("incompatible grids")


# -- public operators on fields -----------------------------------------------------


def gradient(f: ScalarField) -> VectorField:
    return VectorField.from_array(f.grid, f.grid.grad(f.data))


def divergence(v: VectorField) -> ScalarField:
    return ScalarField(v.grid, v.grid.div(v.data))


def laplacian(f: ScalarField) -> ScalarField:
    return ScalarField(f.grid, f.grid.lap(f.data))


def bilaplacian(f: ScalarField) -> ScalarField:
    return laplacian(laplacian(f))


def trilaplacian(f: ScalarField) -> ScalarField:
    return laplacian(bilaplacian(f))


def sym_gradient(v: VectorField) -> np.ndarray:
    """Symmetric gradient as a ``(d, d, *n)`` array (diagonal at cells, off-diagonal at corners)."""
    return v.grid.sym_grad(v.data)


def _fsum_product(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum((np.ravel(a) * np.ravel(b)).tolist())


def inner(a, b) -> float:
    """Discrete L2 inner product ``cell_volume * sum(a*b)``.

    The sum is evaluated with ``math.fsum`` over the row-major flattening, so
    the result is correctly rounded and independent of summation order.
    """
    _same_grid(a, b)
    if isinstance(a, ScalarField) and isinstance(b, ScalarField):
        s = _fsum_product(a.data, b.data)
    elif isinstance(a, VectorField) and isinstance(b, VectorField):
        s = _fsum_product(a.data, b.data)
    else:
        raise TypeError("inner() needs two scalar fields or two vector fields")
    return a.grid.cell_volume * s


def array_inner(grid: Grid, a: np.ndarray, b: np.ndarray) -> float:
    return grid.cell_volume * _fsum_product(a, b)


def norm_l2(a) -> float:
    return math.sqrt(inner(a, a))


def _grad_sq(a) -> float:
    g = a.grid
    if isinstance(a, ScalarField):
        return array_inner(g, g.grad(a.data), g.grad(a.data))
    vg = g.vec_grad(a.data)
    return array_inner(g, vg, vg)


def norm_h1(a) -> float:
    return math.sqrt(inner(a, a) + _grad_sq(a))


def norm_h2(a) -> float:
    if not isinstance(a, ScalarField):
        raise TypeError("norm_h2 is defined for scalar fields")
    lap = a.grid.lap(a.data)
    return math.sqrt(inner(a, a) + _grad_sq(a) + array_inner(a.grid, lap, lap))
