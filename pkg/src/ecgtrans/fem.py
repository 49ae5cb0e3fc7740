"""P1 finite elements for generalized Laplacians ``A^* A``.

Degrees of freedom are node-major: component ``c`` of node ``i`` lives at
index ``i * k + c``.  The sesquilinear form ``a(u, v) = (A u, A v)`` is
integrated exactly on each triangle; boundary integrals use the
trapezoidal rule on edges, so every boundary mass matrix is diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InputError, SolverError

__all__ = [
    "VOLUME",
    "Field",
    "SparseSystem",
    "SolveResult",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_boundary_load",
    "boundary_mass",
    "boundary_l2_inner",
    "boundary_l2_norm",
    "volume_l2_error",
    "solve",
    "dofs",
    "barycentric_gradients",
    "evaluate",
    "transfer_boundary_field",
    "field_from_function",
    "write_field_csv",
    "read_field_csv",
    "write_field_vtk",
    "DIRECT_SIZE_LIMIT",
]

VOLUME = "VOLUME"
DIRECT_SIZE_LIMIT = 60000


class Field:
    """Nodal k-vector values over a mesh (``VOLUME``) or one of its boundary loops.

    ``values`` has shape (m, k) with ``m`` the node count of the support; for a
    boundary field rows follow ``mesh.boundary_nodes(tag)``.
    """

    def __init__(self, mesh, values, support=VOLUME):
        values = np.asarray(values)
        if values.ndim == 1:
            values = values[:, None]
        if not np.iscomplexobj(values):
            values = values.astype(float)
        expected = mesh.n_nodes if support == VOLUME else len(mesh.boundary_nodes(support))
        if values.shape[0] != expected:
            raise InputError(f"field on {support} needs {expected} rows, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise InputError("field values must be finite")
        values = values.copy()
        values.setflags(write=False)
        self.mesh = mesh
        self.values = values
        self.support = support

    @property
    def k(self):
        return self.values.shape[1]

    @property
    def nodes(self):
        if self.support == VOLUME:
            return np.arange(self.mesh.n_nodes)
        return self.mesh.boundary_nodes(self.support)

    @property
    def points(self):
        return self.mesh.vertices[self.nodes]

    def vector(self):
        """Flattened node-major values."""
        return self.values.reshape(-1)

    def trace(self, tag):
        if self.support != VOLUME:
            raise InputError("trace of a boundary field")
        return Field(self.mesh, self.values[self.mesh.boundary_nodes(tag)], tag)

    def with_values(self, values):
        return Field(self.mesh, values, self.support)

    def __add__(self, other):
        _check_same_support(self, other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        _check_same_support(self, other)
        return self.with_values(self.values - other.values)

    def __mul__(self, s):
        return self.with_values(self.values * s)

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)

    def __repr__(self):
        return f"<Field support={self.support} shape={self.values.shape}>"


def _check_same_support(u, v):
    if u.mesh is not v.mesh or u.support != v.support or u.values.shape != v.values.shape:
        raise InputError(f"support mismatch: {u.support}{u.values.shape} vs {v.support}{v.values.shape}")


def field_from_function(mesh, func, support=VOLUME):
    """Sample ``func(x, y) -> (m,) or (m, k)`` at the support nodes."""
    nodes = np.arange(mesh.n_nodes) if support == VOLUME else mesh.boundary_nodes(support)
    p = mesh.vertices[nodes]
    vals = np.asarray(func(p[:, 0], p[:, 1]))
    if vals.ndim == 0:
        vals = np.full(len(nodes), vals)
    if vals.ndim == 2 and vals.shape[0] != len(nodes) and vals.shape[1] == len(nodes):
        vals = vals.T
    return Field(mesh, vals, support)


def dofs(nodes, k):
    """DOF indices of ``nodes`` in node-major order."""
    nodes = np.asarray(nodes)
    return (nodes[:, None] * k + np.arange(k)).reshape(-1)


def barycentric_gradients(mesh):
    """Constant gradients of the three hat functions on every triangle, shape (T, 3, 2)."""
    p = mesh.vertices[mesh.triangles]
    twice_area = 2.0 * mesh.areas
    g = np.empty((len(p), 3, 2))
    for i in range(3):
        j, m = (i + 1) % 3, (i + 2) % 3
        g[:, i, 0] = (p[:, j, 1] - p[:, m, 1]) / twice_area
        g[:, i, 1] = (p[:, m, 0] - p[:, j, 0]) / twice_area
    return g


def _scatter(mesh, local, k):
    """Sum local (T, 3, 3, k, k) blocks into a sparse (N k, N k) matrix."""
    tri = mesh.triangles
    rows = (tri[:, :, None, None, None] * k + np.arange(k)[None, None, None, :, None])
    cols = (tri[:, None, :, None, None] * k + np.arange(k)[None, None, None, None, :])
    rows = np.broadcast_to(rows, local.shape).ravel()
    cols = np.broadcast_to(cols, local.shape).ravel()
    n = mesh.n_nodes * k
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_stiffness(op, mesh):
    """Matrix of ``a(u, v) = int (A v)^* (A u) dx`` on P1 hat functions.

    Entry ``[p k + r, i k + s]`` is ``a(phi_i e_s, phi_p e_r)``, so
    ``v^H K u = a(u, v)``.
    """
    if op.n != 2:
        raise InputError(f"assembly is two-dimensional; operator has n={op.n}")
    g = barycentric_gradients(mesh)
    area = mesh.areas
    B = np.einsum("tij,jlk->tilk", g, op.a)  # (T, 3, l, k): A(phi_i e) minus zero order
    Bh = np.conj(np.swapaxes(B, 2, 3))  # (T, 3, k, l)
    a0 = op.a0
    a0h = np.conj(a0.T)
    local = area[:, None, None, None, None] * np.einsum("tpkl,tilm->tpikm", Bh, B)
    if np.any(a0 != 0):
        cross_u = np.einsum("kl,tilm->tikm", a0h, B)  # a0^* B_i
        cross_v = np.einsum("tpkl,lm->tpkm", Bh, a0)  # B_p^* a0
        third = (area / 3.0)[:, None, None, None, None]
        local = local + third * cross_u[:, None, :, :, :] + third * cross_v[:, :, None, :, :]
        mass_w = (np.ones((3, 3)) + np.eye(3)) / 12.0
        local = local + area[:, None, None, None, None] * mass_w[None, :, :, None, None] * (a0h @ a0)
    return _scatter(mesh, local, op.k)


def assemble_mass(mesh, k=1):
    """Consistent P1 volume mass matrix, block-diagonal in components."""
    w = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = mesh.areas[:, None, None, None, None] * w[None, :, :, None, None] * np.eye(k)
    return _scatter(mesh, local, k)


def boundary_mass(mesh, tag, k=1):
    """Diagonal trapezoidal boundary mass on the full DOF space (zero off ``tag``)."""
    w = np.zeros(mesh.n_nodes)
    w[mesh.boundary_nodes(tag)] = mesh.boundary_weights(tag)
    return sp.diags(np.repeat(w, k)).tocsr()


def assemble_boundary_load(mesh, tag, h0):
    """Full-length load vector ``int_tag phi_i^* h0 ds`` (trapezoidal)."""
    if h0.mesh is not mesh or h0.support != tag:
        raise InputError(f"load data must live on boundary {tag!r} of this mesh, got {h0.support!r}")
    k = h0.k
    b = np.zeros(mesh.n_nodes * k, dtype=h0.values.dtype)
    w = mesh.boundary_weights(tag)
    b[dofs(mesh.boundary_nodes(tag), k)] = (w[:, None] * h0.values).reshape(-1)
    return b


def boundary_l2_inner(mesh, tag, u, v):
    """``(u, v)_{L^2(tag)} = int v^* u ds``, trapezoidal."""
    for f in (u, v):
        if f.mesh is not mesh:
            raise InputError("field belongs to a different mesh")
    uu = u.values if u.support == tag else u.trace(tag).values
    vv = v.values if v.support == tag else v.trace(tag).values
    if uu.shape != vv.shape:
        raise InputError("component count mismatch")
    w = mesh.boundary_weights(tag)
    val = np.sum(w[:, None] * np.conj(vv) * uu)
    return val if np.iscomplexobj(val) and val.imag != 0 else float(np.real(val))


def boundary_l2_norm(field, tag=None):
    tag = tag or field.support
    return float(np.sqrt(abs(boundary_l2_inner(field.mesh, tag, field, field))))


# 7-point degree-5 rule on the reference triangle (barycentric coordinates)
_A1, _B1 = 0.0597158717897698, 0.4701420641051151
_A2, _B2 = 0.7974269853530873, 0.1012865073234563
_QP = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
_QW = np.array([0.225] + [0.1323941527885062] * 3 + [0.1259391805448271] * 3)


def volume_l2_error(u, exact):
    """``||u_h - exact||_{L^2}`` over the mesh, degree-5 quadrature per triangle.

    ``exact(x, y)`` returns (m,) or (m, k) values.
    """
    if u.support != VOLUME:
        raise InputError("volume error needs a volume field")
    mesh = u.mesh
    tri = mesh.triangles
    p = mesh.vertices[tri]  # (T, 3, 2)
    total = 0.0
    for lam, w in zip(_QP, _QW):
        x = np.einsum("i,tic->tc", lam, p)
        uh = np.einsum("i,tik->tk", lam, u.values[tri])
        ex = np.asarray(exact(x[:, 0], x[:, 1]))
        if ex.ndim == 1:
            ex = ex[:, None]
        total += w * np.sum(mesh.areas[:, None] * np.abs(uh - ex) ** 2)
    return float(np.sqrt(total))


def volume_l2_norm(u):
    return volume_l2_error(u, lambda x, y: np.zeros((len(x), u.k)))


# --- sparse systems ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SparseSystem:
    """``K x = rhs`` with optional kernel handling.

    ``kernel`` columns span null(K) (Euclidean); ``constraints`` columns
    ``C`` impose ``C^H x = 0`` on the returned solution.  Supplying a kernel
    makes ``solve`` project the right-hand side onto range(K) first.
    """

    matrix: sp.spmatrix
    rhs: np.ndarray
    kernel: np.ndarray | None = None
    constraints: np.ndarray | None = None

    @property
    def dimension(self):
        return self.matrix.shape[0]


@dataclass
class SolveResult:
    x: np.ndarray
    residual: float
    iterations: int
    method: str
    history: list = field(default_factory=list)


def _orthonormal(cols):
    q, r = np.linalg.qr(cols)
    keep = np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(np.diag(r)).max(initial=0.0))
    return q[:, keep]


def _project_out(v, q):
    return v - q @ (q.conj().T @ v) if q is not None and q.shape[1] else v


def _apply_constraints(x, system, q):
    """Shift ``x`` along the kernel so that ``C^H x = 0``."""
    C = system.constraints
    if C is None or system.kernel is None:
        return x
    Phi = system.kernel
    G = C.conj().T @ Phi
    return x - Phi @ np.linalg.solve(G, C.conj().T @ x)


def solve(system, tol=1e-10, method="auto", maxiter=None):
    """Solve a Hermitian positive (semi)definite sparse system.

    ``method`` is ``"direct"`` (sparse LU, bordered by the kernel when one
    is given), ``"cg"`` (Jacobi-preconditioned CG with kernel projection)
    or ``"auto"`` (direct below :data:`DIRECT_SIZE_LIMIT` unknowns).

    Raises
    ------
    SolverError
        If the relative residual ``||K x - b|| / ||b||`` (with ``b`` projected
        onto range(K) when a kernel is given) exceeds ``tol``.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    K = sp.csr_matrix(system.matrix)
    n = K.shape[0]
    b = np.asarray(system.rhs)
    if b.shape != (n,):
        raise InputError(f"rhs shape {b.shape} does not match matrix size {n}")
    q = _orthonormal(np.asarray(system.kernel)) if system.kernel is not None else None
    b = _project_out(b, q)
    bnorm = np.linalg.norm(b)
    dtype = np.result_type(K.dtype, b.dtype)
    if bnorm == 0:
        return SolveResult(np.zeros(n, dtype=dtype), 0.0, 0, "trivial", [0.0])
    if method == "auto":
        method = "direct" if n <= DIRECT_SIZE_LIMIT else "cg"
    if method == "direct":
        x = _solve_direct(K, b, q)
        res = np.linalg.norm(K @ x - b) / bnorm
        hist = [res]
        if not np.isfinite(res) or res > tol:
            raise SolverError(f"direct solve residual {res:.3e} exceeds tol {tol:.1e}", hist)
        iters = 1
    elif method == "cg":
        x, iters, hist = _pcg(K, b, q, tol, maxiter or 10 * n + 100)
        res = hist[-1]
    else:
        raise InputError(f"unknown method {method!r}")
    x = _apply_constraints(x, system, q)
    return SolveResult(x, float(res), iters, method, hist)


def _solve_direct(K, b, q):
    if q is not None and q.shape[1]:
        d = q.shape[1]
        Qs = sp.csr_matrix(q)
        M = sp.bmat([[K, Qs], [Qs.conj().T, None]], format="csc")
        rhs = np.concatenate([b, np.zeros(d, dtype=b.dtype)])
    else:
        M, rhs = K.tocsc(), b
    dtype = np.result_type(M.dtype, rhs.dtype)
    try:
        lu = spla.splu(M.astype(dtype))
        sol = lu.solve(rhs.astype(dtype))
    except RuntimeError as exc:
        raise SolverError(f"direct factorization failed: {exc}") from None
    return sol[: K.shape[0]]


def _pcg(K, b, q, tol, maxiter):
    diag = K.diagonal().real
    inv_d = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b, dtype=np.result_type(K.dtype, b.dtype))
    r = b.astype(x.dtype)
    z = _project_out(inv_d * r, q)
    p = z.copy()
    rz = np.vdot(r, z).real
    hist = [np.linalg.norm(r) / bnorm]
    for it in range(1, maxiter + 1):
        Kp = K @ p
        pKp = np.vdot(p, Kp).real
        if pKp <= 0 or not np.isfinite(pKp):
            raise SolverError(f"CG breakdown at iteration {it} (p^H K p = {pKp:.3e})", hist)
        step = rz / pKp
        x = x + step * p
        r = _project_out(r - step * Kp, q)
        hist.append(np.linalg.norm(r) / bnorm)
        if hist[-1] <= tol:
            true_res = np.linalg.norm(_project_out(b - K @ x, q)) / bnorm
            if true_res <= tol:
                hist[-1] = true_res
                return x, it, hist
        if not np.isfinite(hist[-1]) or hist[-1] > 1e8:
            break
        z = _project_out(inv_d * r, q)
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {maxiter} iterations "
                      f"(relative residual {hist[-1]:.3e}, tol {tol:.1e})", hist)


# --- point evaluation and transfer ------------------------------------------

def evaluate(field, points):
    """Evaluate a volume P1 field at arbitrary points.

    Points outside the mesh use the affine extension of the nearest
    triangle, so linear fields are reproduced exactly everywhere.
    """
    from scipy.spatial import cKDTree

    if field.support != VOLUME:
        raise InputError("evaluate needs a volume field")
    mesh = field.mesh
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cen = mesh.centroids()
    tree = cKDTree(cen)
    nb = min(12, len(cen))
    _, cand = tree.query(points, k=nb)
    cand = np.atleast_2d(cand)
    if cand.shape[0] != len(points):
        cand = cand.T
    out = np.empty((len(points), field.k), dtype=field.values.dtype)
    tri = mesh.triangles
    v = mesh.vertices
    for n, x in enumerate(points):
        best, best_out = None, np.inf
        for t in cand[n]:
            lam = _barycentric(v[tri[t]], x)
            outside = -min(lam.min(), 0.0)
            if outside < best_out:
                best, best_out = (t, lam), outside
            if outside <= 1e-12:
                break
        t, lam = best
        out[n] = lam @ field.values[tri[t]]
    return out


def _barycentric(p, x):
    T = np.array([[p[0, 0] - p[2, 0], p[1, 0] - p[2, 0]],
                  [p[0, 1] - p[2, 1], p[1, 1] - p[2, 1]]])
    l12 = np.linalg.solve(T, x - p[2])
    return np.array([l12[0], l12[1], 1.0 - l12[0] - l12[1]])


def transfer_boundary_field(field, mesh, tag):
    """Move a boundary field onto loop ``tag`` of ``mesh``.

    Values are linearly interpolated in polar angle about the origin (loops
    here are star-shaped about it); coincident nodes copy values exactly.
    """
    if field.support == VOLUME:
        raise InputError("transfer expects a boundary field")
    src = field.points
    ang = np.mod(np.arctan2(src[:, 1], src[:, 0]), 2 * np.pi)
    order = np.argsort(ang)
    ang, vals = ang[order], field.values[order]
    dst = mesh.vertices[mesh.boundary_nodes(tag)]
    da = np.mod(np.arctan2(dst[:, 1], dst[:, 0]), 2 * np.pi)
    ext_ang = np.concatenate([ang[-1:] - 2 * np.pi, ang, ang[:1] + 2 * np.pi])
    ext_val = np.concatenate([vals[-1:], vals, vals[:1]])
    out = np.empty((len(dst), field.k), dtype=vals.dtype)
    for c in range(field.k):
        col = ext_val[:, c]
        if np.iscomplexobj(col):
            out[:, c] = np.interp(da, ext_ang, col.real) + 1j * np.interp(da, ext_ang, col.imag)
        else:
            out[:, c] = np.interp(da, ext_ang, col)
    # exact copy where nodes coincide
    for i, x in enumerate(dst):
        j = np.searchsorted(ang, da[i])
        for jj in (j - 1, j, j + 1):
            jj %= len(ang)
            if np.allclose(src[order[jj]], x, rtol=0, atol=1e-13):
                out[i] = vals[jj]
                break
    return Field(mesh, out, tag)


# --- serialization ----------------------------------------------------------

def _columns(values):
    if np.iscomplexobj(values):
        names = []
        for c in range(values.shape[1]):
            names += [f"re{c}", f"im{c}"]
        data = np.empty((values.shape[0], 2 * values.shape[1]))
        data[:, 0::2] = values.real
        data[:, 1::2] = values.imag
        return names, data
    return [f"u{c}" for c in range(values.shape[1])], values


def write_field_csv(field, path):
    """CSV: node id, x, y, component values (complex as re/im column pairs)."""
    names, data = _columns(field.values)
    lines = [",".join(["node", "x", "y"] + names)]
    for node, (x, y), row in zip(field.nodes.tolist(), field.points.tolist(), data.tolist()):
        lines.append(",".join([str(node), repr(x), repr(y)] + [repr(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_field_csv(mesh, path, support):
    """Inverse of :func:`write_field_csv`; node ids must match the support order."""
    try:
        lines = Path(path).read_text().strip().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read field file: {exc}") from None
    if not lines:
        raise InputError(f"{path}: empty")
    header = lines[0].split(",")
    if header[:3] != ["node", "x", "y"]:
        raise InputError(f"{path}: header must start with node,x,y")
    try:
        rows = [[float(x) for x in ln.split(",")] for ln in lines[1:]]
    except ValueError:
        raise InputError(f"{path}: non-numeric entry") from None
    arr = np.array(rows)
    expected = np.arange(mesh.n_nodes) if support == VOLUME else mesh.boundary_nodes(support)
    if arr.ndim != 2 or arr.shape[0] != len(expected) or not np.array_equal(arr[:, 0].astype(int), expected):
        raise InputError(f"{path}: node ids do not match {support} of the mesh")
    comp = header[3:]
    vals = arr[:, 3:]
    if comp and comp[0].startswith("re"):
        vals = vals[:, 0::2] + 1j * vals[:, 1::2]
    return Field(mesh, vals, support)


def write_field_vtk(field, path, name="u"):
    """Legacy ASCII VTK unstructured grid with point data.

    Volume fields use triangle cells; boundary fields use line cells of their loop.
    """
    mesh = field.mesh
    if field.support == VOLUME:
        pts = mesh.vertices
        cells, ctype = mesh.triangles, 5
    else:
        nodes = field.nodes
        pts = mesh.vertices[nodes]
        m = len(nodes)
        cells = np.column_stack([np.arange(m), np.roll(np.arange(m), -1)])
        ctype = 3
    out = ["# vtk DataFile Version 3.0", f"ecgtrans field {name}", "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {len(pts)} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in pts.tolist()]
    npc = cells.shape[1]
    out.append(f"CELLS {len(cells)} {len(cells) * (npc + 1)}")
    out += [" ".join([str(npc)] + [str(i) for i in c]) for c in cells.tolist()]
    out.append(f"CELL_TYPES {len(cells)}")
    out += [str(ctype)] * len(cells)
    out.append(f"POINT_DATA {len(pts)}")
    names, data = _columns(field.values)
    for cname, col in zip(names, data.T):
        out += [f"SCALARS {name}_{cname} double 1", "LOOKUP_TABLE default"]
        out += [repr(v) for v in col.tolist()]
    Path(path).write_text("\n".join(out) + "\n")
