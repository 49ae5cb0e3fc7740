"""Regularized solution of the Cauchy problem on the body domain.

Given Dirichlet data ``f`` and zero conormal data on the outer loop, recover
``u_b`` with ``A_b^* A_b u_b = 0``.  The unknown is the Dirichlet trace ``g``
on the inner loop; each evaluation of the forward map is a mixed solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .boundary import MixedProblem
from .errors import InputError, SolverError
from .fem import Field, boundary_l2_norm, dofs
from .mesh import INNER, OUTER

__all__ = [
    "CauchySolution",
    "CauchyOperator",
    "forward_map",
    "solve_tikhonov",
    "solve_alternating",
    "select_alpha_discrepancy",
    "add_noise",
    "SweepEntry",
    "DiscrepancyError",
    "TIKHONOV",
    "ALTERNATING",
]

log = logging.getLogger(__name__)

TIKHONOV = "TIKHONOV"
ALTERNATING = "ALTERNATING"


@dataclass
class CauchySolution:
    u_b: Field
    trace_inner: Field
    flux_inner: Field
    alpha: float
    discrepancy: float
    iterations: int
    method: str
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class SweepEntry:
    alpha: float
    discrepancy: float
    iterations: int


class DiscrepancyError(SolverError):
    """No alpha on the sweep reached ``tau * delta``; ``table`` lists the sweep."""

    def __init__(self, message, table):
        super().__init__(message)
        self.table = list(table)


def _boundary_h1(mesh, tag, k):
    """Trapezoidal mass plus arc-length stiffness on a loop, (m k) x (m k)."""
    nodes = mesh.boundary_nodes(tag)
    m = len(nodes)
    pos = {int(n): i for i, n in enumerate(nodes)}
    idx = mesh.boundary_edges(tag)
    rows, cols, vals = [], [], []
    for e in idx:
        p, q = (pos[int(v)] for v in mesh.edges[e])
        s = 1.0 / mesh.edge_lengths[e]
        rows += [p, q, p, q]
        cols += [p, q, q, p]
        vals += [s, s, -s, -s]
    S = sp.coo_matrix((vals, (rows, cols)), shape=(m, m))
    M = sp.diags(mesh.boundary_weights(tag))
    return sp.kron((M + S).tocsr(), sp.identity(k), format="csc")


class CauchyOperator:
    """Inner Dirichlet trace -> outer trace map and its adjoint.

    Everything lives in node-major boundary vectors.  ``forward`` solves
    the mixed problem (``u = g`` on INNER, ``nu_A u = 0`` on OUTER) and
    ``adjoint`` is its exact discrete adjoint in the Euclidean pairing.
    """

    def __init__(self, op_b, mesh):
        self.op = op_b
        self.mesh = mesh
        self.k = op_b.k
        self.mixed = MixedProblem(op_b, mesh, INNER, OUTER)
        n_out = mesh.boundary_nodes(OUTER)
        full_out = dofs(n_out, self.k)
        where = np.full(mesh.n_nodes * self.k, -1)
        where[self.mixed.f_dofs] = np.arange(len(self.mixed.f_dofs))
        self.out_in_free = where[full_out]
        self.w_out = np.repeat(mesh.boundary_weights(OUTER), self.k)
        self.w_in = np.repeat(mesh.boundary_weights(INNER), self.k)
        self.R = _boundary_h1(mesh, INNER, self.k)
        self._R_lu = spla.splu(self.R)
        self.n_in = len(mesh.boundary_nodes(INNER)) * self.k
        self.n_out = len(full_out)

    def solve_volume(self, g):
        return self.mixed.solve(g)

    def forward(self, g):
        u = self.mixed.solve(g)
        return u[dofs(self.mesh.boundary_nodes(OUTER), self.k)], u

    def adjoint(self, y):
        rhs = np.zeros(len(self.mixed.f_dofs), dtype=np.result_type(y, float))
        rhs[self.out_in_free] = y
        z = self.mixed.solve_free(rhs)
        return -(self.mixed.K_df @ z)

    def apply_R_inv(self, x):
        if np.iscomplexobj(x):
            return self._R_lu.solve(x.real) + 1j * self._R_lu.solve(x.imag)
        return self._R_lu.solve(x)

    def objective(self, g, f, alpha, gbar=None):
        """``J(g) = 1/2 ||F g - f||^2_{L2(OUTER)} + alpha/2 ||g - gbar||^2_{H1(INNER)}``."""
        gbar = np.zeros_like(g) if gbar is None else gbar
        r = self.forward(g)[0] - f
        d = g - gbar
        return float(0.5 * np.real(np.vdot(r, self.w_out * r)) + 0.5 * alpha * np.real(np.vdot(d, self.R @ d)))

    def gradient(self, g, f, alpha, gbar=None):
        """Adjoint gradient of :meth:`objective` (Euclidean Riesz representative)."""
        gbar = np.zeros_like(g) if gbar is None else gbar
        r = self.forward(g)[0] - f
        return self.adjoint(self.w_out * r) + alpha * (self.R @ (g - gbar))

    def normal_apply(self, g, alpha):
        return self.adjoint(self.w_out * self.forward(g)[0]) + alpha * (self.R @ g)


def _as_outer(f, mesh, k):
    if not isinstance(f, Field) or f.mesh is not mesh or f.support != OUTER:
        raise InputError("f must be a Field on the OUTER loop of the body mesh")
    if f.k != k:
        raise InputError(f"f has {f.k} components, operator expects {k}")
    return f.vector()


def forward_map(op_b, mesh, g, cauchy_op=None):
    """Outer trace of the mixed solution with ``u = g`` on INNER and zero conormal data on OUTER."""
    if g.mesh is not mesh or g.support != INNER:
        raise InputError("g must be a Field on the INNER loop")
    C = cauchy_op or CauchyOperator(op_b, mesh)
    y, _ = C.forward(g.vector())
    return Field(mesh, y.reshape(-1, op_b.k), OUTER)


def _pcg(apply, rhs, precond, tol, maxiter, stall=200):
    """Preconditioned CG for a Hermitian positive definite operator.

    Raises SolverError on stagnation (no 10x residual drop within ``stall``
    iterations) or when ``maxiter`` is reached.
    """
    bnorm = np.linalg.norm(rhs)
    x = np.zeros_like(rhs)
    if bnorm == 0:
        return x, 0, [0.0]
    r = rhs.copy()
    z = precond(r)
    p = z.copy()
    rz = np.real(np.vdot(r, z))
    hist = [1.0]
    best, best_it = 1.0, 0
    for it in range(1, maxiter + 1):
        Ap = apply(p)
        pAp = np.real(np.vdot(p, Ap))
        if pAp <= 0:
            raise SolverError(f"CG breakdown at iteration {it}", hist)
        step = rz / pAp
        x = x + step * p
        r = r - step * Ap
        hist.append(float(np.linalg.norm(r) / bnorm))
        if hist[-1] <= tol:
            return x, it, hist
        if hist[-1] < 0.1 * best:
            best, best_it = hist[-1], it
        elif it - best_it > stall:
            raise SolverError(f"CG stagnated at relative residual {hist[-1]:.3e} (tol {tol:.1e})", hist)
        z = precond(r)
        rz_new = np.real(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG reached {maxiter} iterations at relative residual {hist[-1]:.3e}", hist)


def _finish(C, u, f_vec, alpha, iterations, method, history):
    mesh = C.mesh
    k = C.k
    u_field = Field(mesh, u.reshape(-1, k))
    flux = C.mixed.conormal(u, INNER)
    trace = u_field.trace(INNER)
    misfit = u[dofs(mesh.boundary_nodes(OUTER), k)] - f_vec
    disc = float(np.sqrt(np.real(np.vdot(misfit, C.w_out * misfit))))
    return CauchySolution(u_field, trace, flux, alpha, disc, iterations, method, history)


def solve_tikhonov(op_b, mesh, f, alpha, tol=1e-10, gbar=None, maxiter=None, cauchy_op=None):
    """Minimize the Tikhonov functional over inner Dirichlet data.

    Normal equations ``(F^* W F + alpha R) g = F^* W f + alpha R gbar`` are
    solved by CG preconditioned with ``R^{-1}`` (``R`` = boundary H1 Gram
    matrix); ``F^*`` costs one adjoint mixed solve.
    """
    if not alpha > 0:
        raise InputError(f"alpha must be positive, got {alpha}")
    C = cauchy_op or CauchyOperator(op_b, mesh)
    f_vec = _as_outer(f, mesh, C.k)
    gb = np.zeros(C.n_in, dtype=f_vec.dtype) if gbar is None else (
        gbar.vector() if isinstance(gbar, Field) else np.asarray(gbar))
    rhs = C.adjoint(C.w_out * f_vec) + alpha * (C.R @ gb)
    g, iters, hist = _pcg(lambda v: C.normal_apply(v, alpha), rhs, C.apply_R_inv, tol,
                          maxiter or 20 * C.n_in + 200)
    u = C.solve_volume(g)
    return _finish(C, u, f_vec, alpha, iters, TIKHONOV, hist)


def solve_alternating(op_b, mesh, f, max_iter=200, stop_tol=1e-8):
    """Alternating mixed solves on the Cauchy data.

    Each sweep solves (i) Dirichlet ``f`` on OUTER with conormal guess ``eta``
    on INNER, then (ii) zero conormal data on OUTER with the inner trace of
    (i) as Dirichlet data; ``eta`` becomes the conormal of (ii) on INNER
    (measured with the normal of (i)'s problem, i.e. the same outward
    normal).  Stops when successive inner traces agree to
    ``stop_tol * max(||trace||, ||f||)`` in boundary L2.
    """
    if max_iter < 1:
        raise InputError("max_iter must be >= 1")
    k = op_b.k
    f_vec = _as_outer(f, mesh, k)
    p1 = MixedProblem(op_b, mesh, OUTER, INNER)
    p2 = MixedProblem(op_b, mesh, INNER, OUTER, stiffness=p1.K)
    C = CauchyOperator.__new__(CauchyOperator)
    C.mesh, C.k, C.mixed = mesh, k, p2
    C.w_out = np.repeat(mesh.boundary_weights(OUTER), k)
    fnorm = boundary_l2_norm(f)
    in_dofs = dofs(mesh.boundary_nodes(INNER), k)
    w_in = np.repeat(mesh.boundary_weights(INNER), k)

    def bnorm(v):
        return float(np.sqrt(np.real(np.vdot(v, w_in * v))))

    eta = np.zeros(len(in_dofs), dtype=f_vec.dtype)
    prev = None
    hist = []
    u2 = None
    for it in range(1, max_iter + 1):
        u1 = p1.solve(f_vec, eta)
        t = u1[in_dofs]
        u2 = p2.solve(t)
        eta = p2.conormal(u2, INNER).vector()
        tn = bnorm(t)
        if not np.isfinite(tn) or tn > 1e6 * max(fnorm, np.finfo(float).tiny):
            raise SolverError(f"alternating iteration diverged at sweep {it} (trace norm {tn:.3e})", hist)
        change = bnorm(t - prev) if prev is not None else bnorm(t)
        hist.append(change)
        scale = max(tn, fnorm)
        if scale == 0:
            break
        if prev is not None and change <= stop_tol * scale:
            break
        # a fixed point after one sweep: the next (i) reproduces t exactly
        if prev is None and bnorm(p1.solve(f_vec, eta)[in_dofs] - t) <= stop_tol * scale:
            break
        prev = t
    return _finish(C, u2, f_vec, 0.0, it, ALTERNATING, hist)


def add_noise(f, level, seed):
    """Return ``(f + noise, delta)`` with ``||noise||_{L2(loop)} = level * ||f||``.

    Noise is node-wise standard normal from ``numpy.random.default_rng(seed)``,
    rescaled to the requested relative level.
    """
    if level < 0:
        raise InputError("noise level must be nonnegative")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(f.values.shape)
    if np.iscomplexobj(f.values):
        raw = raw + 1j * rng.standard_normal(f.values.shape)
    e = f.with_values(raw)
    fn = boundary_l2_norm(f)
    en = boundary_l2_norm(e)
    delta = level * fn
    noise = e * (delta / en) if en > 0 else e * 0.0
    return f + noise, float(delta)


def select_alpha_discrepancy(op_b, mesh, f, delta, tau=1.1, alpha_start=1e-2, factor=10.0,
                             alpha_min=1e-14, tol=1e-10):
    """Largest alpha on the sweep ``alpha_start / factor^j`` with discrepancy ``<= tau * delta``.

    Returns ``(alpha, solution, table)``.

    Raises
    ------
    DiscrepancyError
        If the sweep reaches ``alpha_min`` without meeting the target.
    """
    if not delta > 0:
        raise InputError("delta must be positive")
    if tau < 1:
        raise InputError("tau must be >= 1")
    C = CauchyOperator(op_b, mesh)
    table = []
    j = 0
    while (alpha := alpha_start / factor**j) >= alpha_min * (1 - 1e-12):
        j += 1
        sol = solve_tikhonov(op_b, mesh, f, alpha, tol=tol, cauchy_op=C)
        table.append(SweepEntry(alpha, sol.discrepancy, sol.iterations))
        log.info("alpha=%.1e discrepancy=%.4e target=%.4e", alpha, sol.discrepancy, tau * delta)
        if sol.discrepancy <= tau * delta:
            return alpha, sol, table
    raise DiscrepancyError(f"no alpha >= {alpha_min:.1e} reached discrepancy {tau * delta:.3e}", table)
