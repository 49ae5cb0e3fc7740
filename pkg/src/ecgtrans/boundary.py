"""Well-posed boundary problems for ``A^* A``: Neumann (Fredholm) and mixed.

The Neumann problem ``A^*A h = 0``, ``nu_A h = h0`` has a finite kernel;
it is solvable iff ``h0`` is boundary-L2 orthogonal to that kernel, and the
solution is pinned by the same orthogonality.  The mixed (Zaremba) problem
puts Dirichlet data on one loop and conormal data on the other.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import CompatibilityError, InputError, KernelError, SolverError
from .fem import (
    VOLUME,
    Field,
    SparseSystem,
    assemble_boundary_load,
    assemble_mass,
    assemble_stiffness,
    boundary_mass,
    dofs,
    solve,
)

__all__ = [
    "KernelBasis",
    "MixedProblem",
    "kernel_basis",
    "compatibility_defect",
    "solve_neumann",
    "neumann_residual",
    "orthogonality_residual",
    "solve_mixed",
    "conormal_trace",
    "green_residual",
    "EPS_KER",
    "CTOL",
    "KERNEL_CAP",
    "GAP_FACTOR",
]

log = logging.getLogger(__name__)

EPS_KER = 1e-8
CTOL = 1e-6
KERNEL_CAP = 20
GAP_FACTOR = 100.0
DENSE_EIG_LIMIT = 1500


@dataclass(frozen=True, eq=False)
class KernelBasis:
    """Orthonormal basis of the discrete Neumann kernel.

    ``vectors`` has shape (N k, d).  ``inner_product`` is ``"boundary"``
    (orthonormal in L2 of loop ``tag``) or ``"volume"`` when the kernel
    traces are linearly dependent on the boundary.
    """

    mesh: object
    k: int
    tag: str
    vectors: np.ndarray
    eigenvalues: np.ndarray
    matrix_norm: float
    inner_product: str
    spectrum: np.ndarray

    @property
    def dimension(self):
        return self.vectors.shape[1]

    def fields(self):
        return [Field(self.mesh, v.reshape(-1, self.k)) for v in self.vectors.T]

    def traces(self):
        """Kernel traces on the loop, shape (m k, d)."""
        return self.vectors[dofs(self.mesh.boundary_nodes(self.tag), self.k)]


def _matrix_norm(K):
    """Spectral norm of a Hermitian matrix."""
    if K.shape[0] <= DENSE_EIG_LIMIT:
        return float(np.abs(np.linalg.eigvalsh(K.toarray())).max())
    v0 = np.ones(K.shape[0], dtype=K.dtype)
    return float(abs(spla.eigsh(K, k=1, which="LM", v0=v0, return_eigenvectors=False)[0]))


def _lowest_eigenpairs(K, count, norm):
    n = K.shape[0]
    if n <= DENSE_EIG_LIMIT or count >= n - 1:
        w, V = np.linalg.eigh(K.toarray())
        return w[:count], V[:, :count]
    shift = 1e-6 * norm
    v0 = np.ones(n, dtype=K.dtype)
    # shift-invert Lanczos == shifted inverse iteration with implicit deflation
    w, V = spla.eigsh(K, k=count, sigma=-shift, which="LM", v0=v0, tol=0)
    order = np.argsort(w)
    return w[order], V[:, order]


def kernel_basis(op, mesh, eps_ker=EPS_KER, tag=None, cap=KERNEL_CAP, stiffness=None):
    """Near-null space of the Neumann stiffness for ``op`` on ``mesh``.

    Eigenvectors with Rayleigh quotient at most ``eps_ker * ||K||`` are kept.
    The first rejected eigenvalue must exceed ``GAP_FACTOR * eps_ker * ||K||``.

    Raises
    ------
    KernelError
        If more than ``cap`` eigenvalues fall below the threshold, or the
        spectral gap around it is ambiguous.
    """
    if not 0 < eps_ker <= 1e-4:
        raise InputError(f"eps_ker must be in (0, 1e-4], got {eps_ker}")
    tag = tag or mesh.tags[0]
    K = stiffness if stiffness is not None else assemble_stiffness(op, mesh)
    k = op.k
    norm = _matrix_norm(K)
    count = min(cap + 1, K.shape[0])
    w, V = _lowest_eigenpairs(K, count, norm)
    thresh = eps_ker * norm
    kept = w <= thresh
    d = int(kept.sum())
    if d > cap or (d == count and count == cap + 1):
        raise KernelError(f"kernel dimension exceeds cap {cap}: Shapiro-Lopatinsky suspect", w)
    rejected = w[~kept]
    if rejected.size and rejected.min() < GAP_FACTOR * thresh:
        raise KernelError(
            f"no spectral gap: eigenvalue {rejected.min() / norm:.3e}*||K|| within factor "
            f"{GAP_FACTOR:g} of threshold {eps_ker:.1e}: Shapiro-Lopatinsky suspect", w)
    Phi = V[:, :d]
    inner = "boundary"
    if d:
        B = boundary_mass(mesh, tag, k)
        G = Phi.conj().T @ (B @ Phi)
        ev = np.linalg.eigvalsh(G)
        if ev.min() <= 1e-10 * ev.max():
            inner = "volume"
            M = assemble_mass(mesh, k)
            G = Phi.conj().T @ (M @ Phi)
            log.info("kernel traces dependent on %s; using volume L2 normalization", tag)
        L = np.linalg.cholesky(0.5 * (G + G.conj().T))
        Phi = sla.solve_triangular(L.conj(), Phi.T, lower=True).T  # Phi L^{-H}
    Phi.setflags(write=False)
    return KernelBasis(mesh, k, tag, Phi, w[:d].copy(), norm, inner, w.copy())


def _weight_matrix(kernel):
    if kernel.inner_product == "boundary":
        return boundary_mass(kernel.mesh, kernel.tag, kernel.k)
    return assemble_mass(kernel.mesh, kernel.k)


def compatibility_defect(h0, kernel, floor=0.0):
    """``max_phi |(h0, phi)_{L2(loop)}| / (max(||h0||, floor) ||phi||)``; 0 for an empty kernel.

    Without ``floor`` this is the largest cosine between the data and a
    kernel element.  A positive ``floor`` (a reference data scale) keeps the
    measure meaningful when ``h0`` itself is at roundoff level.
    """
    if h0.mesh is not kernel.mesh or h0.support != kernel.tag:
        raise InputError("h0 must live on the kernel's boundary loop")
    if kernel.dimension == 0:
        return 0.0
    w = kernel.mesh.boundary_weights(kernel.tag)
    W = np.repeat(w, kernel.k)
    h = h0.vector()
    hnorm = max(np.sqrt(np.sum(W * np.abs(h) ** 2)), floor)
    if hnorm == 0:
        return 0.0
    T = kernel.traces()
    pnorm = np.sqrt(np.sum(W[:, None] * np.abs(T) ** 2, axis=0))
    ip = np.abs(T.conj().T @ (W * h))
    return float(np.max(ip / (hnorm * pnorm)))


def solve_neumann(op, mesh, h0, tol=1e-10, ctol=CTOL, eps_ker=EPS_KER, kernel=None):
    """Normalized solution of ``A^*A h = 0``, ``nu_A h = h0`` on loop ``h0.support``.

    The returned field's boundary trace is orthogonal to every kernel element
    (volume-orthogonal if the kernel fell back to volume normalization).

    Raises
    ------
    CompatibilityError
        If :func:`compatibility_defect` exceeds ``ctol``.
    """
    tag = h0.support
    if tag == VOLUME:
        raise InputError("Neumann data must be a boundary field")
    if h0.k != op.k:
        raise InputError(f"data has {h0.k} components, operator expects {op.k}")
    K = assemble_stiffness(op, mesh)
    if kernel is None:
        kernel = kernel_basis(op, mesh, eps_ker, tag=tag, stiffness=K)
    defect = compatibility_defect(h0, kernel)
    if defect > ctol:
        raise CompatibilityError(
            f"Neumann data violates the solvability condition: defect {defect:.3e} > ctol {ctol:.1e}",
            defect, ctol)
    b = assemble_boundary_load(mesh, tag, h0)
    if kernel.dimension:
        Phi = kernel.vectors
        C = _weight_matrix(kernel) @ Phi
        system = SparseSystem(K, b, kernel=Phi, constraints=C)
    else:
        system = SparseSystem(K, b)
    result = solve(system, tol=tol)
    return Field(mesh, result.x.reshape(-1, op.k))


def green_residual(op, u, h0, v):
    """``(|a(u, v) - int v^* h0 ds|, scale)`` for the discrete Green identity.

    ``scale = ||v|| (||K u|| + ||b||)`` (Euclidean DOF norms, ``b`` the load
    vector of ``h0``), so a relative check is ``residual <= tol * scale``.
    """
    K = assemble_stiffness(op, u.mesh)
    b = assemble_boundary_load(u.mesh, h0.support, h0)
    x, y = u.vector(), v.vector()
    Ku = K @ x
    res = abs(np.vdot(y, Ku) - np.vdot(y, b))
    return float(res), float(np.linalg.norm(y) * (np.linalg.norm(Ku) + np.linalg.norm(b)))


def neumann_residual(op, h, h0):
    """Relative residual ``||K h - b|| / ||b||`` of a Neumann solution."""
    K = assemble_stiffness(op, h.mesh)
    b = assemble_boundary_load(h.mesh, h0.support, h0)
    bn = np.linalg.norm(b)
    r = np.linalg.norm(K @ h.vector() - b)
    return float(r / bn) if bn else float(r)


class MixedProblem:
    """Factorized mixed problem: Dirichlet on one loop, conormal data elsewhere.

    The free-DOF block is factorized once; :meth:`solve` and
    :meth:`solve_adjoint` then cost two triangular solves each.
    """

    def __init__(self, op, mesh, dirichlet_tag, neumann_tag=None, stiffness=None):
        if dirichlet_tag == neumann_tag:
            raise InputError(f"Dirichlet and Neumann tags collide: {dirichlet_tag!r}")
        self.op = op
        self.mesh = mesh
        self.k = op.k
        self.dirichlet_tag = dirichlet_tag
        self.neumann_tag = neumann_tag
        if neumann_tag is not None:
            mesh.boundary_nodes(neumann_tag)
        K = stiffness if stiffness is not None else assemble_stiffness(op, mesh)
        self.K = K.tocsr()
        n = mesh.n_nodes * self.k
        self.d_dofs = dofs(mesh.boundary_nodes(dirichlet_tag), self.k)
        mask = np.ones(n, dtype=bool)
        mask[self.d_dofs] = False
        self.f_dofs = np.flatnonzero(mask)
        self.K_ff = self.K[self.f_dofs][:, self.f_dofs].tocsc()
        self.K_fd = self.K[self.f_dofs][:, self.d_dofs]
        self.K_df = self.K[self.d_dofs][:, self.f_dofs]
        try:
            self._lu = spla.splu(self.K_ff)
        except RuntimeError as exc:
            raise SolverError(f"mixed problem is singular: {exc}") from None

    def _solve_ff(self, rhs):
        if np.iscomplexobj(rhs) and not np.iscomplexobj(self.K_ff.data):
            return self._lu.solve(rhs.real) + 1j * self._lu.solve(rhs.imag)
        return self._lu.solve(rhs)

    def solve(self, g, q=None):
        """Full DOF vector with ``u = g`` on the Dirichlet loop, ``nu_A u = q`` on the Neumann loop.

        ``g`` and ``q`` are flattened node-major boundary vectors (or Fields).
        """
        g = g.vector() if isinstance(g, Field) else np.asarray(g)
        rhs = -(self.K_fd @ g)
        if q is not None:
            qf = q if isinstance(q, Field) else Field(self.mesh, np.asarray(q).reshape(-1, self.k),
                                                       self.neumann_tag)
            b = assemble_boundary_load(self.mesh, self.neumann_tag, qf)
            rhs = rhs + b[self.f_dofs]
        u = np.zeros(self.mesh.n_nodes * self.k, dtype=np.result_type(rhs, g))
        u[self.d_dofs] = g
        u[self.f_dofs] = self._solve_ff(rhs)
        return u

    def solve_free(self, rhs_free):
        """``K_ff^{-1} rhs`` on free DOFs (used for adjoint solves)."""
        return self._solve_ff(rhs_free)

    def conormal(self, u, tag):
        """Variational conormal derivative of DOF vector ``u`` on loop ``tag``."""
        return _conormal_from_residual(self.K, self.mesh, self.k, u, tag)

    def field(self, u):
        return Field(self.mesh, u.reshape(-1, self.k))


def _conormal_from_residual(K, mesh, k, u, tag):
    nodes = mesh.boundary_nodes(tag)
    r = (K @ u)[dofs(nodes, k)].reshape(-1, k)
    w = mesh.boundary_weights(tag)
    return Field(mesh, r / w[:, None], tag)


def solve_mixed(op, mesh, dirichlet, neumann=None, tol=1e-10):
    """Solve ``A^*A u = 0`` with ``u = g`` on ``dirichlet[0]`` and ``nu_A u = q`` on ``neumann[0]``.

    ``dirichlet`` and ``neumann`` are ``(tag, Field)`` pairs; a missing
    Neumann pair means homogeneous conormal data on the remaining boundary.
    """
    dtag, g = dirichlet
    ntag, q = neumann if neumann is not None else (None, None)
    if g.support != dtag or (q is not None and q.support != ntag):
        raise InputError("boundary data must live on the tag it is paired with")
    prob = MixedProblem(op, mesh, dtag, ntag)
    u = prob.solve(g, q)
    # residual on free DOFs as a solver audit
    rhs = -(prob.K_fd @ g.vector())
    if q is not None:
        rhs = rhs + assemble_boundary_load(mesh, ntag, q)[prob.f_dofs]
    res = np.linalg.norm(prob.K_ff @ u[prob.f_dofs] - rhs)
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if res > max(tol, 1e-12) * scale * 1e3:
        raise SolverError(f"mixed solve residual {res / scale:.3e} too large", [res / scale])
    return Field(mesh, u.reshape(-1, op.k))


def conormal_trace(op, mesh, u, tag):
    """Conormal derivative ``nu_A u`` on loop ``tag`` from the discrete Green identity.

    Solves the (trapezoidal, diagonal) boundary mass system
    ``M q = a(u, phi_i)`` for the loop nodes ``i``.  The normal is the
    outward normal of the meshed domain.
    """
    if u.support != VOLUME:
        raise InputError("conormal_trace needs a volume field")
    K = assemble_stiffness(op, mesh)
    return _conormal_from_residual(K, mesh, op.k, u.vector(), tag)


def orthogonality_residual(h, kernel):
    """``max_phi |(h, phi)| / ||h||`` in the kernel's normalization inner product."""
    if kernel.dimension == 0:
        return 0.0
    W = _weight_matrix(kernel)
    x = h.vector()
    hn = np.sqrt(abs(np.vdot(x, W @ x)))
    if hn == 0:
        return 0.0
    return float(np.max(np.abs(kernel.vectors.conj().T @ (W @ x))) / hn)
