"""Closed-form fixtures and mesh-refinement studies."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .boundary import solve_mixed, solve_neumann
from .errors import InputError
from .fem import Field, field_from_function, volume_l2_error, volume_l2_norm
from .mesh import INNER, OUTER, generate_annulus, generate_disk
from .operators import gradient, gradient_with_mass

__all__ = [
    "HarmonicFixture",
    "harmonic_fixture",
    "ConvergenceRow",
    "convergence_study",
    "table_to_csv",
    "FIXTURES",
]


@dataclass(frozen=True)
class HarmonicFixture:
    """``u = (r^m + r_out^(2m) r^-m) cos(m theta)`` on an annulus.

    Its conormal derivative (plain normal derivative for the gradient)
    vanishes on ``r = r_out``; ``trace``, ``flux`` and ``data`` are the
    amplitudes of ``cos(m theta)`` for the inner trace, the inner flux with
    the annulus' outward normal, and the outer trace.
    """

    m: int
    r_in: float = 1.0
    r_out: float = 2.0

    @property
    def c(self):
        return self.r_out ** (2 * self.m)

    def radial(self, r):
        return r**self.m + self.c * r ** (-self.m)

    def u(self, x, y):
        r = np.hypot(x, y)
        return self.radial(r) * np.cos(self.m * np.arctan2(y, x))

    @property
    def trace(self):
        return self.radial(self.r_in)

    @property
    def flux(self):
        m, r = self.m, self.r_in
        return -(m * r ** (m - 1) - m * self.c * r ** (-m - 1))

    @property
    def data(self):
        return self.radial(self.r_out)

    def cos_field(self, mesh, tag, amplitude):
        return field_from_function(mesh, lambda x, y: amplitude * np.cos(self.m * np.arctan2(y, x)), tag)


def harmonic_fixture(m=1, r_in=1.0, r_out=2.0):
    if m < 1:
        raise InputError("mode number must be >= 1")
    return HarmonicFixture(m, r_in, r_out)


@dataclass(frozen=True)
class ConvergenceRow:
    h: float
    n_nodes: int
    error: float
    order: float


def _zaremba(h, m=1):
    fx = harmonic_fixture(m)
    mesh = generate_annulus(fx.r_in, fx.r_out, h)
    g = fx.cos_field(mesh, INNER, fx.trace)
    q = fx.cos_field(mesh, OUTER, 0.0)
    u = solve_mixed(gradient(2), mesh, (INNER, g), (OUTER, q))
    exact = fx.u
    return mesh, volume_l2_error(u, exact) / volume_l2_norm(field_from_function(mesh, exact))


def _neumann_cosh(h):
    # (-lap + 1) cosh x = 0, outward normal derivative on r = 1 is x sinh x
    mesh = generate_disk(1.0, h)
    nodes = mesh.boundary_nodes(INNER)
    x = mesh.vertices[nodes, 0]
    h0 = Field(mesh, (x * np.sinh(x))[:, None], INNER)
    u = solve_neumann(gradient_with_mass(2), mesh, h0)
    exact = lambda x, y: np.cosh(x)
    return mesh, volume_l2_error(u, exact) / volume_l2_norm(field_from_function(mesh, exact))


def _constant(h):
    fx = harmonic_fixture(1)
    mesh = generate_annulus(fx.r_in, fx.r_out, h)
    g = field_from_function(mesh, lambda x, y: np.full_like(x, 2.5), INNER)
    q = field_from_function(mesh, lambda x, y: np.zeros_like(x), OUTER)
    u = solve_mixed(gradient(2), mesh, (INNER, g), (OUTER, q))
    exact = lambda x, y: np.full_like(x, 2.5)
    return mesh, volume_l2_error(u, exact) / volume_l2_norm(field_from_function(mesh, exact))


FIXTURES = {
    "zaremba": _zaremba,
    "neumann-cosh": _neumann_cosh,
    "constant": _constant,
}


def convergence_study(fixture="zaremba", levels=3, h0=0.2):
    """Relative volume L2 errors on ``levels`` meshes ``h0, h0/2, ...``.

    ``order`` is ``log2(e_{i-1}/e_i)`` (NaN on the first row).
    """
    if fixture not in FIXTURES:
        raise InputError(f"unknown fixture {fixture!r}; known: {sorted(FIXTURES)}")
    if levels < 3:
        raise InputError("need at least 3 refinement levels")
    if not h0 > 0:
        raise InputError("h0 must be positive")
    rows = []
    prev = None
    for i in range(levels):
        h = h0 / 2**i
        mesh, err = FIXTURES[fixture](h)
        order = math.log2(prev / err) if prev and err > 0 else math.nan
        rows.append(ConvergenceRow(h, mesh.n_nodes, err, order))
        prev = err
    return rows


def table_to_csv(rows, path=None):
    """Write ``rows`` (dataclasses) as CSV to ``path``; return the text."""
    buf = io.StringIO()
    if rows:
        names = list(rows[0].__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
