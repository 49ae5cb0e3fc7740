"""Algebra of first-order constant-coefficient matrix differential operators.

An operator ``A = sum_j a_j d/dx_j + a_0`` acts on ``k``-vector fields and
produces ``l``-vectors.  Everything here is exact matrix arithmetic on the
coefficient arrays; no discretization is involved.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .errors import InputError

__all__ = [
    "FirstOrderOperator",
    "SecondOrderOperator",
    "ConormalOperator",
    "principal_symbol",
    "symbol_injectivity_margin",
    "formal_adjoint",
    "generalized_laplacian",
    "strong_ellipticity_constant",
    "conormal",
    "scale",
    "unit_directions",
    "gradient",
    "gradient_with_mass",
    "cauchy_riemann",
    "holonomic",
    "builtin_operator",
    "BUILTIN_OPERATORS",
    "load_operator",
    "save_operator",
    "operator_to_dict",
    "operator_from_dict",
]


def _freeze(arr):
    arr = np.array(arr)
    if not np.iscomplexobj(arr):
        arr = arr.astype(float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FirstOrderOperator:
    """``A = sum_j a[j] d_j + a0`` with ``a`` of shape (n, l, k).

    ``l >= k`` is enforced unless ``check_rows`` is false; only adjoints
    (which map l-vectors back to k-vectors) are built that way.
    """

    a: np.ndarray
    a0: np.ndarray
    name: str = ""
    check_rows: bool = field(default=True, repr=False)

    def __post_init__(self):
        a = _freeze(self.a)
        a0 = _freeze(self.a0)
        if a.ndim != 3:
            raise InputError(f"a must have shape (n, l, k), got {a.shape}")
        if a0.shape != a.shape[1:]:
            raise InputError(f"a0 shape {a0.shape} does not match a_j shape {a.shape[1:]}")
        n, l, k = a.shape
        if n < 2:
            raise InputError(f"spatial dimension must be >= 2, got {n}")
        if self.check_rows and l < k:
            raise InputError(f"need l >= k for an injective symbol, got l={l}, k={k}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(a0))):
            raise InputError("operator coefficients must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "a0", a0)

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def l(self):  # noqa: E743
        return self.a.shape[1]

    @property
    def k(self):
        return self.a.shape[2]

    @property
    def is_complex(self):
        return np.iscomplexobj(self.a) or np.iscomplexobj(self.a0)

    def equals(self, other, atol=0.0):
        """Coefficientwise comparison (zero tolerance by default)."""
        if self.a.shape != other.a.shape:
            return False
        return bool(np.allclose(self.a, other.a, rtol=0, atol=atol)
                    and np.allclose(self.a0, other.a0, rtol=0, atol=atol))

    def __repr__(self):
        label = self.name or "FirstOrderOperator"
        return f"<{label} n={self.n} l={self.l} k={self.k}>"


@dataclass(frozen=True, eq=False)
class SecondOrderOperator:
    """``L u = -sum_{j,m} Q[j,m] d_j d_m u + sum_j b[j] d_j u + c u``.

    ``Q`` has shape (n, n, k, k), ``b`` (n, k, k), ``c`` (k, k).
    """

    Q: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", _freeze(self.Q))
        object.__setattr__(self, "b", _freeze(self.b))
        object.__setattr__(self, "c", _freeze(self.c))

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def k(self):
        return self.c.shape[0]

    def principal_part(self):
        """Q symmetrized in (j, m); the canonical form since d_j d_m = d_m d_j."""
        return 0.5 * (self.Q + self.Q.transpose(1, 0, 2, 3))

    def symbol(self, zeta):
        """Principal symbol ``sum_{|alpha|=2} L_alpha zeta^alpha = -sum Q_jm zeta_j zeta_m``."""
        zeta = np.asarray(zeta, dtype=float)
        return -np.einsum("j,m,jmab->ab", zeta, zeta, self.Q)

    def equals(self, other, atol=0.0):
        if self.Q.shape != other.Q.shape:
            return False
        return bool(np.allclose(self.principal_part(), other.principal_part(), rtol=0, atol=atol)
                    and np.allclose(self.b, other.b, rtol=0, atol=atol)
                    and np.allclose(self.c, other.c, rtol=0, atol=atol))

    @classmethod
    def negative_laplacian(cls, n, k=1, factor=1.0, zero_order=0.0):
        """``factor * (-Delta) * I_k + zero_order * I_k``; used as a reference form."""
        eye = np.eye(k)
        Q = np.zeros((n, n, k, k))
        for j in range(n):
            Q[j, j] = factor * eye
        return cls(Q, np.zeros((n, k, k)), zero_order * eye)


@dataclass(frozen=True, eq=False)
class ConormalOperator:
    """Boundary operator ``nu_A u = sigma(A)(nu)^* A u``."""

    base: FirstOrderOperator

    def coefficients(self, nu):
        """Return ``(M, M0)``: ``nu_A u = sum_j M[j] d_j u + M0 u`` for unit normal ``nu``."""
        s = principal_symbol(self.base, nu)
        sh = s.conj().T
        M = np.einsum("pl,jlk->jpk", sh, self.base.a)
        M0 = sh @ self.base.a0
        return M, M0

    def normal_matrix(self, nu):
        """``sigma^*(A)(nu) sigma(A)(nu)``, the k x k coefficient of the normal derivative."""
        s = principal_symbol(self.base, nu)
        return s.conj().T @ s


def principal_symbol(op, zeta):
    """``sum_j a_j zeta_j``; the zero-order term does not enter."""
    zeta = np.asarray(zeta)
    if zeta.shape != (op.n,):
        raise InputError(f"zeta must have length {op.n}, got shape {zeta.shape}")
    return np.einsum("j,jlk->lk", zeta, op.a)


def unit_directions(n, samples):
    """Deterministic quasi-uniform points on the unit sphere in R^n."""
    if n == 2:
        t = 2.0 * np.pi * np.arange(samples) / samples
        return np.column_stack([np.cos(t), np.sin(t)])
    if n == 3:
        # Fibonacci lattice
        i = np.arange(samples) + 0.5
        z = 1.0 - 2.0 * i / samples
        phi = np.pi * (1.0 + 5 ** 0.5) * i
        rho = np.sqrt(1.0 - z * z)
        return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    from scipy.special import ndtri

    pts = qmc.Halton(d=n, scramble=False).random(samples + 1)[1:]
    g = ndtri(np.clip(pts, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def symbol_injectivity_margin(op, samples=64):
    """Smallest singular value of the symbol over sampled unit directions.

    A positive value certifies full column rank ``k`` on the sample; zero
    means a rank drop was seen.
    """
    if samples < 8:
        raise InputError("need at least 8 samples")
    smin = np.inf
    for zeta in unit_directions(op.n, samples):
        sv = np.linalg.svd(principal_symbol(op, zeta), compute_uv=False)
        smin = min(smin, sv[op.k - 1] if sv.size >= op.k else 0.0)
    return float(smin) if smin > 1e-14 else 0.0


def formal_adjoint(op):
    """``A^* = -sum_j a_j^* d_j + a0^*``, fixed by ``(Au, v) = (u, A^* v)``."""
    a = -np.conj(np.transpose(op.a, (0, 2, 1)))
    a0 = np.conj(op.a0.T)
    name = f"adjoint({op.name})" if op.name else ""
    return FirstOrderOperator(a, a0, name, check_rows=False)


def generalized_laplacian(op):
    """Compose ``A^* A`` into a :class:`SecondOrderOperator`."""
    ah = np.conj(np.transpose(op.a, (0, 2, 1)))  # (n, k, l)
    a0h = np.conj(op.a0.T)
    Q = np.einsum("jkl,mlp->jmkp", ah, op.a)
    b = np.einsum("kl,jlp->jkp", a0h, op.a) - np.einsum("jkl,lp->jkp", ah, op.a0)
    c = a0h @ op.a0
    return SecondOrderOperator(Q, b, c)


def strong_ellipticity_constant(op2, samples=64):
    """Largest ``c`` with ``Re(-w^* sigma(L)(zeta) w) >= c |w|^2 |zeta|^2`` on the sample."""
    cmin = np.inf
    for zeta in unit_directions(op2.n, samples):
        s = -op2.symbol(zeta)
        herm = 0.5 * (s + s.conj().T)
        cmin = min(cmin, np.linalg.eigvalsh(herm)[0])
    return float(max(cmin, 0.0)) if cmin > 1e-14 else 0.0


def conormal(op):
    return ConormalOperator(op)


def scale(op, factor):
    """``factor * A``."""
    if not np.isfinite(factor) or factor <= 0:
        raise InputError(f"scale factor must be positive, got {factor}")
    name = f"{factor:g}*{op.name}" if op.name and factor != 1 else op.name
    return FirstOrderOperator(factor * op.a, factor * op.a0, name)


# --- fixtures ---------------------------------------------------------------

def gradient(n=2):
    """``A = grad`` (k=1, l=n)."""
    a = np.zeros((n, n, 1))
    for j in range(n):
        a[j, j, 0] = 1.0
    return FirstOrderOperator(a, np.zeros((n, 1)), "gradient")


def gradient_with_mass(n=2):
    """``A = (grad; 1)`` (k=1, l=n+1)."""
    a = np.zeros((n, n + 1, 1))
    for j in range(n):
        a[j, j, 0] = 1.0
    a0 = np.zeros((n + 1, 1))
    a0[n, 0] = 1.0
    return FirstOrderOperator(a, a0, "gradient_with_mass")


def cauchy_riemann():
    """``d_x - i d_y`` on C-valued functions in the plane."""
    a = np.array([[[1.0 + 0j]], [[-1j]]])
    return FirstOrderOperator(a, np.zeros((1, 1), dtype=complex), "cauchy_riemann")


def holonomic():
    """6x3 first-order system whose solutions are ``u3 = c1 x + c2 y + c3``.

    Rows: (d_x u1, d_y u1, d_x u2, d_y u2, d_x u3 - u1, d_y u3 - u2).
    """
    ax = np.zeros((6, 3))
    ay = np.zeros((6, 3))
    a0 = np.zeros((6, 3))
    ax[0, 0] = ay[1, 0] = 1.0
    ax[2, 1] = ay[3, 1] = 1.0
    ax[4, 2] = ay[5, 2] = 1.0
    a0[4, 0] = a0[5, 1] = -1.0
    return FirstOrderOperator(np.stack([ax, ay]), a0, "holonomic")


BUILTIN_OPERATORS = {
    "gradient": gradient,
    "gradient_with_mass": gradient_with_mass,
    "cauchy_riemann": cauchy_riemann,
    "holonomic": holonomic,
}


def builtin_operator(name):
    try:
        return BUILTIN_OPERATORS[name]()
    except KeyError:
        raise InputError(f"unknown operator {name!r}; known: {sorted(BUILTIN_OPERATORS)}") from None


# --- file format ------------------------------------------------------------
#
# JSON object: {"format": "ecgtrans-operator/1", "name": str, "n": int,
#   "l": int, "k": int, "a": [n matrices], "a0": matrix}
# Each matrix is a list of l rows of k entries.  Real operators store plain
# numbers; if any coefficient is complex every entry is a [re, im] pair.

OPERATOR_FORMAT = "ecgtrans-operator/1"


def _encode_matrix(m, as_complex):
    if as_complex:
        return [[[float(z.real), float(z.imag)] for z in row] for row in m]
    return [[float(x) for x in row] for row in m]


def _decode_entry(x):
    if isinstance(x, (list, tuple)):
        if len(x) != 2:
            raise InputError(f"complex entry must be [re, im], got {x!r}")
        return complex(float(x[0]), float(x[1]))
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise InputError(f"bad matrix entry {x!r}")
    return float(x)


def _decode_matrix(rows, l, k):
    if not isinstance(rows, list) or len(rows) != l or any(
            not isinstance(r, list) or len(r) != k for r in rows):
        raise InputError(f"expected an {l}x{k} matrix")
    vals = [[_decode_entry(x) for x in row] for row in rows]
    if any(isinstance(x, complex) for row in vals for x in row):
        return np.array(vals, dtype=complex)
    return np.array(vals, dtype=float)


def operator_to_dict(op):
    cplx = op.is_complex
    return {
        "format": OPERATOR_FORMAT,
        "name": op.name,
        "n": op.n,
        "l": op.l,
        "k": op.k,
        "a": [_encode_matrix(m, cplx) for m in op.a],
        "a0": _encode_matrix(op.a0, cplx),
    }


def operator_from_dict(d):
    try:
        n, l, k = int(d["n"]), int(d["l"]), int(d["k"])
        a_rows, a0_rows = d["a"], d["a0"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed operator description: {exc}") from None
    if not isinstance(a_rows, list) or len(a_rows) != n:
        raise InputError(f"expected {n} coefficient matrices in 'a'")
    mats = [_decode_matrix(m, l, k) for m in a_rows]
    a0 = _decode_matrix(a0_rows, l, k)
    dtype = complex if any(np.iscomplexobj(m) for m in mats + [a0]) else float
    a = np.array(mats, dtype=dtype).reshape(n, l, k)
    return FirstOrderOperator(a, a0.astype(dtype), d.get("name", ""))


def save_operator(op, path):
    Path(path).write_text(json.dumps(operator_to_dict(op), indent=1) + "\n")


def load_operator(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None
    except OSError as exc:
        raise InputError(f"cannot read operator file: {exc}") from None
    return operator_from_dict(d)
