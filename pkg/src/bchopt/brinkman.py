"""Stationary Brinkman solve for the velocity at one time level.

The velocity ``v`` is sought in the discretely divergence-free face space with

    eta0 * <D v, D z> + <lambda v, z> = <force, z>     for all div-free z,

and the pressure is carried as a mean-zero Lagrange multiplier.  The default
solver factorises the symmetric saddle-point matrix once per time level; the
factorisation is reused for tangent solves and (transposed) adjoint solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from bchopt.grid import Grid, ScalarField, VectorField, array_inner


class CoercivityError(ValueError):
    pass


class BrinkmanConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


# -- sparse operators ---------------------------------------------------------------


def _axis_matrix(grid: Grid, axis: int, kind: str) -> sp.csr_matrix:
    k = grid.n[axis]
    eye = sp.identity(k, format="csr")
    up = sp.diags([np.ones(k - 1)], [1], shape=(k, k), format="lil")
    if grid.periodic:
        up[k - 1, 0] = 1.0
    up = up.tocsr()
    if kind == "fwd":
        m = (up - eye) / grid.h[axis]
    else:
        m = 0.5 * (up + eye)
    if not grid.periodic:
        m = m.tolil()
        m[k - 1, :] = 0.0
        m = m.tocsr()
    return m


def axis_operator(grid: Grid, axis: int, kind: str) -> sp.csr_matrix:
    """Sparse matrix of ``grid.fwd`` (kind ``"fwd"``) or ``grid.c2f`` (kind ``"c2f"``)."""
    key = ("sparse", axis, kind)
    if key not in grid._cache:
        mats = [_axis_matrix(grid, a, kind) if a == axis else sp.identity(k, format="csr")
                for a, k in enumerate(grid.n)]
        out = mats[0]
        for m in mats[1:]:
            out = sp.kron(out, m, format="csr")
        grid._cache[key] = out.tocsr()
    return grid._cache[key]


class _Assembly:
    """Grid-dependent sparse blocks shared by every time level."""

    def __init__(self, grid: Grid):
        d, N = grid.dim, grid.size
        self.grid = grid
        self.active = np.flatnonzero(grid.velocity_mask().ravel() > 0)
        self.P = sp.identity(d * N, format="csr")[self.active]
        fwd = [axis_operator(grid, a, "fwd") for a in range(d)]
        zero = sp.csr_matrix((N, N))
        # symmetric gradient, entries stacked as (a, b) blocks
        rows = []
        for a in range(d):
            for b in range(d):
                blocks = [zero] * d
                if a == b:
                    blocks = [(-fwd[a].T).tocsr() if c == a else zero for c in range(d)]
                else:
                    blocks = [0.5 * fwd[b] if c == a else (0.5 * fwd[a] if c == b else zero)
                              for c in range(d)]
                rows.append(sp.hstack(blocks, format="csr"))
        self.S = sp.vstack(rows, format="csr") @ self.P.T
        vg_rows = []
        for a in range(d):
            for b in range(d):
                blk = (-fwd[a].T).tocsr() if a == b else fwd[b]
                vg_rows.append(sp.hstack([blk if c == a else zero for c in range(d)], format="csr"))
        self.V = sp.vstack(vg_rows, format="csr") @ self.P.T
        self.G = self.P @ sp.vstack(fwd, format="csr")
        self.visc = (self.S.T @ self.S).tocsr()
        self.nv = len(self.active)
        self.N = N


def assembly(grid: Grid) -> _Assembly:
    if "brinkman" not in grid._cache:
        grid._cache["brinkman"] = _Assembly(grid)
    return grid._cache["brinkman"]


# -- problem / solution -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BrinkmanProblem:
    grid: Grid
    lambda_field: np.ndarray
    force: np.ndarray
    eta0: float = 1.0
    solver_tol: float = 1e-10
    max_iter: int | None = None

    def __post_init__(self):
        lam = np.asarray(self.lambda_field, dtype=float)
        if np.ndim(lam) == 0:
            lam = np.full(self.grid.n, float(lam))
        object.__setattr__(self, "lambda_field", lam.reshape(self.grid.n))
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float).reshape((self.grid.dim,) + self.grid.n))
        if self.max_iter is None:
            object.__setattr__(self, "max_iter", 10 * self.grid.size)


@dataclass(frozen=True, eq=False)
class BrinkmanSolution:
    v: np.ndarray
    pressure: np.ndarray
    residual: float
    iterations: int

    def velocity_field(self, grid: Grid) -> VectorField:
        return VectorField.from_array(grid, self.v)

    def pressure_field(self, grid: Grid) -> ScalarField:
        return ScalarField(grid, self.pressure)


def face_lambda(grid: Grid, lam_cells: np.ndarray) -> np.ndarray:
    """Drag coefficient on the velocity faces: average of the adjacent cell values."""
    return np.stack([grid.c2f(lam_cells, a) for a in range(grid.dim)])


class BrinkmanOperator:
    """Factorised saddle-point operator for one drag coefficient field."""

    def __init__(self, grid: Grid, lam_cells: np.ndarray, eta0: float = 1.0):
        lam_cells = np.asarray(lam_cells, dtype=float)
        if not np.all(lam_cells > 0):
            raise CoercivityError("coercivity violated: lambda must be positive everywhere")
        self.grid = grid
        self.eta0 = eta0
        self.asm = asm = assembly(grid)
        self.lam_faces = face_lambda(grid, lam_cells)
        lam_act = self.lam_faces.ravel()[asm.active]
        self.A = (eta0 * asm.visc + sp.diags(lam_act)).tocsr()
        e = sp.csr_matrix(np.ones((asm.N, 1)))
        self.K = sp.bmat(
            [[self.A, asm.G, None], [asm.G.T, None, e], [None, e.T, None]], format="csc"
        )
        self._lu = None

    @property
    def lu(self):
        if self._lu is None:
            self._lu = spla.splu(self.K)
        return self._lu

    def _pack(self, face_arr):
        return np.asarray(face_arr).ravel()[self.asm.active]

    def _unpack(self, x):
        out = np.zeros(self.grid.dim * self.grid.size)
        out[self.asm.active] = x
        return out.reshape((self.grid.dim,) + self.grid.n)

    def apply_A(self, v: np.ndarray) -> np.ndarray:
        return self._unpack(self.A @ self._pack(v))

    def solve(self, force: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        asm = self.asm
        rhs = np.zeros(asm.nv + asm.N + 1)
        rhs[: asm.nv] = self._pack(force)
        x = self.lu.solve(rhs)
        return self._unpack(x[: asm.nv]), x[asm.nv: asm.nv + asm.N].reshape(self.grid.n)

    def solve_T(self, rhs_faces: np.ndarray) -> np.ndarray:
        """Velocity part of the transposed saddle-point solve (used by the adjoint)."""
        asm = self.asm
        rhs = np.zeros(asm.nv + asm.N + 1)
        rhs[: asm.nv] = self._pack(rhs_faces)
        x = self.lu.solve(rhs, trans="T")
        return self._unpack(x[: asm.nv])

    def residual(self, v, p, force) -> float:
        """Relative momentum residual ``|A v + grad p - force| / |force|``."""
        asm = self.asm
        r = self.A @ self._pack(v) + asm.G @ np.ravel(p) - self._pack(force)
        scale = max(np.linalg.norm(self._pack(force)), 1e-300)
        return float(np.linalg.norm(r) / scale)


# -- Krylov route ---------------------------------------------------------------------


def pcg(apply, b, precond=None, tol=1e-12, max_iter=1000, x0=None):
    """Preconditioned conjugate gradients; returns ``(x, iterations, relative residual)``."""
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply(x)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0, 0.0
    z = precond(r) if precond else r
    p = z.copy()
    rz = r @ z
    for k in range(1, max_iter + 1):
        Ap = apply(p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            return x, k, rel
        z = precond(r) if precond else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter, np.linalg.norm(r) / bnorm


def _solve_uzawa(op: BrinkmanOperator, force, tol, max_iter):
    """CG on the pressure Schur complement with Jacobi-preconditioned CG velocity solves."""
    asm = op.asm
    diag = op.A.diagonal()
    jac = lambda r: r / diag
    inner_tol = tol * 1e-2
    inner_iters = 0

    def solve_A(b):
        nonlocal inner_iters
        x, k, rel = pcg(lambda y: op.A @ y, b, jac, inner_tol, max_iter)
        inner_iters += k
        if rel > inner_tol:
            raise BrinkmanConvergenceError("velocity CG did not converge", rel)
        return x

    F = op._pack(force)
    v0 = solve_A(F)

    def schur(q):
        q = q - q.mean()
        return asm.G.T @ solve_A(asm.G @ q)

    b = asm.G.T @ v0
    p, outer, rel = pcg(schur, b, None, tol, max_iter)
    if rel > tol:
        raise BrinkmanConvergenceError("pressure Schur CG did not converge", rel)
    p -= p.mean()
    v = solve_A(F - asm.G @ p)
    return op._unpack(v), p.reshape(op.grid.n), outer + inner_iters


def solve_brinkman(problem: BrinkmanProblem, method: str = "direct") -> BrinkmanSolution:
    """Solve the Brinkman problem.

    ``method="direct"`` factorises the saddle-point matrix (exact to rounding);
    ``method="uzawa"`` runs the Schur-complement CG iteration to ``solver_tol``.
    """
    if not np.all(problem.lambda_field > 0):
        raise CoercivityError("coercivity violated: lambda must be positive everywhere")
    op = BrinkmanOperator(problem.grid, problem.lambda_field, problem.eta0)
    if method == "direct":
        v, p = op.solve(problem.force)
        iters = 1
    elif method == "uzawa":
        v, p, iters = _solve_uzawa(op, problem.force, problem.solver_tol, problem.max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = op.residual(v, p, problem.force)
    if not res <= problem.solver_tol:
        raise BrinkmanConvergenceError("Brinkman residual above tolerance", res)
    return BrinkmanSolution(v, p, res, iters)


def assemble_force(mu: ScalarField, phi: ScalarField, u: VectorField) -> VectorField:
    """Right-hand side ``mu * grad(phi) + u`` on the velocity faces."""
    if not (mu.grid == phi.grid == u.grid):
        from bchopt.grid import GridMismatchError

        raise GridMismatchError("incompatible grids")
    return VectorField.from_array(phi.grid, force_array(phi.grid, mu.data, phi.data, u.data))


def force_array(grid: Grid, mu: np.ndarray, phi: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = np.stack([grid.c2f(mu, a) * grid.fwd(phi, a) for a in range(grid.dim)])
    return out + u * grid.velocity_mask()


# -- diagnostics -----------------------------------------------------------------------


def bilinear_form(grid: Grid, v: np.ndarray, z: np.ndarray, lam_cells, eta0: float = 1.0) -> float:
    """``eta0 * int Dv : grad z + int lambda v . z`` evaluated with the discrete quadrature."""
    lam_f = face_lambda(grid, np.broadcast_to(lam_cells, grid.n))
    return eta0 * array_inner(grid, grid.sym_grad(v), grid.vec_grad(z)) + array_inner(grid, lam_f * v, z)


def velocity_norm_v_sq(grid: Grid, v: np.ndarray) -> float:
    vg = grid.vec_grad(v)
    return array_inner(grid, v, v) + array_inner(grid, vg, vg)


def divergence_free_basis(grid: Grid) -> np.ndarray:
    """Orthonormal basis (columns, active-face coordinates) of the discrete div-free space."""
    key = "divfree_basis"
    if key not in grid._cache:
        asm = assembly(grid)
        grid._cache[key] = scipy.linalg.null_space(asm.G.T.toarray())
    return grid._cache[key]


def korn_constant(grid: Grid, tol: float = 1e-10, max_iter: int = 200000) -> float:
    """Discrete Korn constant by power iteration.

    Largest ``C`` with ``|z|_V^2 <= C (|Dz|^2 + |z|^2)`` over discretely
    divergence-free ``z``.
    """
    asm = assembly(grid)
    Q = divergence_free_basis(grid)
    I = sp.identity(asm.nv, format="csr")
    At = Q.T @ ((I + asm.V.T @ asm.V) @ Q)
    Bt = Q.T @ ((I + asm.S.T @ asm.S) @ Q)
    L = np.linalg.cholesky(Bt)
    Linv = scipy.linalg.solve_triangular(L, np.eye(len(L)), lower=True)
    C = Linv @ At @ Linv.T
    C = 0.5 * (C + C.T)
    x = np.random.default_rng(12345).standard_normal(len(C))
    x /= np.linalg.norm(x)
    rho = x @ C @ x
    for _ in range(max_iter):
        y = C @ x
        x = y / np.linalg.norm(y)
        rho_new = x @ C @ x
        if abs(rho_new - rho) <= tol * rho_new:
            return float(rho_new)
        rho = rho_new
    raise BrinkmanConvergenceError("Korn power iteration did not converge", abs(rho_new - rho))


def coercivity_alpha(grid: Grid, eta0: float, lambda_lo: float) -> tuple[float, float]:
    """Return ``(alpha, C_K)`` with ``alpha = min(eta0, lambda_lo) / C_K``."""
    if not (eta0 > 0 and lambda_lo > 0):
        raise ValueError("eta0 and lambda_lo must be positive")
    ck = korn_constant(grid)
    return min(eta0, lambda_lo) / ck, ck


def random_divergence_free(grid: Grid, rng: np.random.Generator) -> np.ndarray:
    Q = divergence_free_basis(grid)
    asm = assembly(grid)
    x = np.zeros(grid.dim * grid.size)
    x[asm.active] = Q @ rng.standard_normal(Q.shape[1])
    return x.reshape((grid.dim,) + grid.n)


def energy_identity_gap(grid: Grid, sol: BrinkmanSolution, lam_cells, force, eta0=1.0) -> float:
    """Relative gap between ``a(v, v)`` and ``int force . v``."""
    a = bilinear_form(grid, sol.v, sol.v, lam_cells, eta0)
    b = array_inner(grid, force * grid.velocity_mask(), sol.v)
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def divergence_norm(grid: Grid, v: np.ndarray) -> float:
    dv = grid.div(v)
    return math.sqrt(array_inner(grid, dv, dv))
