"""Three-step reconstruction of the transmembrane potential.

Step 1 solves the Cauchy problem for ``u_b`` on the body domain (annulus),
Step 2 solves the Neumann problem for ``h`` on the heart domain (disk) with
data taken from the conormal flux of ``u_b``, and Step 3 evaluates
``v = (h - u_b)/lam^2 - u_b`` on the heart surface.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boundary import CTOL, EPS_KER, compatibility_defect, kernel_basis, neumann_residual, \
    orthogonality_residual, solve_neumann
from .cauchy import ALTERNATING, TIKHONOV, CauchyOperator, add_noise, select_alpha_discrepancy, \
    solve_alternating, solve_tikhonov
from .errors import CompatibilityError, InputError, SolverError
from .fem import Field, boundary_l2_norm, evaluate, read_field_csv, transfer_boundary_field
from .mesh import INNER, OUTER, generate_annulus, generate_disk, load_mesh
from .operators import builtin_operator, load_operator, scale, symbol_injectivity_margin

__all__ = [
    "PipelineConfig",
    "PipelineReport",
    "PipelineError",
    "KernelCoincidence",
    "run",
    "transmembrane_potential",
    "check_kernel_coincidence",
    "boundary_data",
    "load_config",
    "MATCH",
    "MISMATCH",
]

log = logging.getLogger(__name__)

MATCH = "MATCH"
MISMATCH = "MISMATCH"


def boundary_data(mesh, tag, spec, k=1, base_dir=None):
    """Boundary Field from a short data spec.

    ``"zero"``, ``"const:c"``, ``"cos:m:amp"`` (``amp*cos(m*theta)`` in every
    component) or the path of a field CSV file.
    """
    if isinstance(spec, (int, float)):
        spec = f"const:{spec}"
    parts = str(spec).split(":")
    nodes = mesh.boundary_nodes(tag)
    x = mesh.vertices[nodes]
    try:
        if parts[0] == "zero" and len(parts) == 1:
            vals = np.zeros(len(nodes))
        elif parts[0] == "const" and len(parts) == 2:
            vals = np.full(len(nodes), float(parts[1]))
        elif parts[0] == "cos" and len(parts) == 3:
            m, amp = int(parts[1]), float(parts[2])
            vals = amp * np.cos(m * np.arctan2(x[:, 1], x[:, 0]))
        else:
            path = Path(spec)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            if not path.is_file():
                raise InputError(f"data spec {spec!r} is neither a known form nor an existing file")
            f = read_field_csv(mesh, path, tag)
            if f.k != k:
                raise InputError(f"data file {path} has {f.k} components, expected {k}")
            return f
    except ValueError as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"malformed data spec {spec!r}: {exc}") from None
    return Field(mesh, np.repeat(vals[:, None], k, axis=1), tag)


@dataclass
class PipelineConfig:
    """Settings for one reconstruction run.

    ``operator`` is ``A_e`` (a FirstOrderOperator, a builtin name or an
    operator file path); ``A_b = A_e / lam_tilde`` and ``A_i = lam A_e``.
    Meshes are generated from ``r_in``, ``r_out`` and ``h`` unless
    ``body_mesh``/``heart_mesh`` are given (Mesh objects or file paths).
    The heart mesh boundary must be tagged INNER and coincide with the
    body's INNER loop.
    """

    operator: object = "gradient"
    lam: float = 1.0
    lam_tilde: float = 1.0
    data: object = "zero"
    r_in: float = 1.0
    r_out: float = 2.0
    h: float = 0.05
    body_mesh: object = None
    heart_mesh: object = None
    method: str = TIKHONOV
    alpha: float | None = 1e-8
    noise_level: float = 0.0
    seed: int = 0
    tau: float = 1.1
    max_iter: int = 200
    stop_tol: float = 1e-8
    tol: float = 1e-10
    ctol: float = CTOL
    eps_ker: float = EPS_KER
    base_dir: str | None = None

    def validate(self):
        for name in ("lam", "lam_tilde", "h", "tol", "ctol", "eps_ker", "tau"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InputError(f"{name} must be a positive finite number, got {v!r}")
        if self.method not in (TIKHONOV, ALTERNATING):
            raise InputError(f"method must be {TIKHONOV} or {ALTERNATING}, got {self.method!r}")
        if self.noise_level < 0:
            raise InputError("noise_level must be nonnegative")
        if self.tau < 1:
            raise InputError("tau must be >= 1")
        if self.method == TIKHONOV and self.noise_level == 0 and not (self.alpha and self.alpha > 0):
            raise InputError("Tikhonov without noise needs a positive alpha")
        if not 0 < self.r_in < self.r_out:
            raise InputError("need 0 < r_in < r_out")
        if self.max_iter < 1:
            raise InputError("max_iter must be >= 1")

    def resolve_operator(self):
        op = self.operator
        if isinstance(op, str):
            path = Path(op)
            if self.base_dir is not None and not path.is_absolute():
                path = Path(self.base_dir) / path
            op = load_operator(path) if path.suffix == ".json" or path.is_file() else builtin_operator(op)
        return op

    def resolve_meshes(self):
        def get(m, make):
            if m is None:
                return make()
            if isinstance(m, (str, Path)):
                p = Path(m)
                if self.base_dir is not None and not p.is_absolute():
                    p = Path(self.base_dir) / p
                return load_mesh(p)
            return m

        body = get(self.body_mesh, lambda: generate_annulus(self.r_in, self.r_out, self.h))
        heart = get(self.heart_mesh, lambda: generate_disk(self.r_in, self.h))
        return body, heart


_CONFIG_KEYS = {f for f in PipelineConfig.__dataclass_fields__}


def load_config(path, **overrides):
    """Read a JSON pipeline config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise InputError("config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    raw.setdefault("base_dir", str(path.parent))
    return PipelineConfig(**raw)


@dataclass
class PipelineReport:
    """Everything a run produced; fields stay ``None`` past the failing stage."""

    config: PipelineConfig
    cauchy: object = None
    delta: float | None = None
    sweep: list = field(default_factory=list)
    flux_heart: Field | None = None
    trace_heart: Field | None = None
    h0: Field | None = None
    kernel_dimension: int | None = None
    normalization: str | None = None
    defect: float | None = None
    h: Field | None = None
    h_trace: Field | None = None
    v: Field | None = None
    residuals: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    stage: str = "init"

    def summary(self):
        """Flat key -> value dictionary (timings excluded)."""
        s = {
            "stage": self.stage,
            "method": self.config.method,
            "lam": self.config.lam,
            "lam_tilde": self.config.lam_tilde,
        }
        if self.cauchy is not None:
            s.update(alpha=self.cauchy.alpha, discrepancy=self.cauchy.discrepancy,
                     cauchy_iterations=self.cauchy.iterations)
        if self.delta is not None:
            s["delta"] = self.delta
        for name in ("kernel_dimension", "normalization", "defect"):
            if getattr(self, name) is not None:
                s[name] = getattr(self, name)
        s.update(self.residuals)
        if self.v is not None:
            s["v_norm"] = boundary_l2_norm(self.v)
            s["h_trace_norm"] = boundary_l2_norm(self.h_trace)
        return s


class PipelineError(SolverError):
    """A pipeline stage failed; ``report`` holds everything computed so far."""

    def __init__(self, message, report, stage, cause=None):
        super().__init__(message)
        self.report = report
        self.stage = stage
        self.cause = cause


def transmembrane_potential(h, u_b, lam):
    """``v = (h - u_b)/lam^2 - u_b`` pointwise on the heart surface."""
    if not (isinstance(lam, (int, float)) and lam > 0):
        raise InputError(f"lambda must be positive, got {lam!r}")
    if h.mesh is not u_b.mesh or h.support != u_b.support:
        raise InputError("h and u_b must live on the same boundary")
    if h.values.shape != u_b.values.shape:
        raise InputError("h and u_b have different shapes")
    return h.with_values((h.values - u_b.values) / lam**2 - u_b.values)


@dataclass
class KernelCoincidence:
    status: str
    dim_heart: int
    dim_body: int
    residual: float
    details: str


def check_kernel_coincidence(op_e, mesh_heart, op_b, mesh_body, eps_ker=EPS_KER, tol=1e-6):
    """Compare the Neumann kernels of ``op_e`` on the heart and ``op_b`` on the body.

    Each body kernel element is restricted to the heart surface and
    projected onto the span of the heart kernel traces (boundary L2).  The
    result is MATCH when the dimensions agree and every relative projection
    residual is at most ``tol``.
    """
    notes = []
    ratio = _proportionality(op_e, op_b)
    if ratio is None:
        notes.append("operators are not positive multiples of each other")
    try:
        kh = kernel_basis(op_e, mesh_heart, eps_ker, tag=INNER)
        kb = kernel_basis(op_b, mesh_body, eps_ker, tag=INNER)
    except SolverError as exc:
        return KernelCoincidence(MISMATCH, -1, -1, math.inf, f"kernel detection failed: {exc}")
    residual = 0.0
    if kb.dimension:
        pts = mesh_heart.vertices[mesh_heart.boundary_nodes(INNER)]
        w = np.repeat(mesh_heart.boundary_weights(INNER), op_e.k)
        T = kh.traces()
        for phi in kb.fields():
            t = evaluate(phi, pts).reshape(-1)
            tn = np.sqrt(np.sum(w * np.abs(t) ** 2))
            if tn == 0:
                continue
            if T.shape[1]:
                G = T.conj().T @ (w[:, None] * T)
                c = np.linalg.solve(G, T.conj().T @ (w * t))
                r = t - T @ c
            else:
                r = t
            residual = max(residual, float(np.sqrt(np.sum(w * np.abs(r) ** 2)) / tn))
    ok = ratio is not None and kh.dimension == kb.dimension and residual <= tol
    notes.append(f"dims {kh.dimension} (heart) vs {kb.dimension} (body), trace residual {residual:.2e}")
    return KernelCoincidence(MATCH if ok else MISMATCH, kh.dimension, kb.dimension, residual,
                             "; ".join(notes))


def _proportionality(op_e, op_b):
    """Positive ``c`` with ``op_e = c op_b`` (to rounding), else None."""
    ne = np.linalg.norm(op_b.a) + np.linalg.norm(op_b.a0)
    if op_e.a.shape != op_b.a.shape or ne == 0:
        return None
    c = (np.linalg.norm(op_e.a) + np.linalg.norm(op_e.a0)) / ne
    err = np.linalg.norm(op_e.a - c * op_b.a) + np.linalg.norm(op_e.a0 - c * op_b.a0)
    return c if err <= 1e-12 * c * ne else None


def _check_interface(body, heart):
    nb = body.boundary_nodes(INNER)
    nh = heart.boundary_nodes(INNER)
    pb = body.vertices[nb]
    ph = heart.vertices[nh]
    rb = np.hypot(pb[:, 0], pb[:, 1])
    rh = np.hypot(ph[:, 0], ph[:, 1])
    scale_ = max(rb.max(), rh.max())
    if abs(rb.mean() - rh.mean()) > 1e-3 * scale_:
        raise InputError("heart mesh boundary does not coincide with the body's inner loop")


def run(config):
    """Execute the three reconstruction steps.

    Raises
    ------
    InputError
        For invalid settings (no partial report).
    PipelineError
        When a numerical stage fails; ``.report`` carries the partial results
        including the compatibility defect if it was computed.
    """
    config.validate()
    op_e = config.resolve_operator()
    if op_e.n != 2:
        raise InputError("only planar (n = 2) operators are supported")
    margin = symbol_injectivity_margin(op_e)
    if margin <= 0:
        raise InputError("operator symbol is not injective (margin 0)")
    op_b = scale(op_e, 1.0 / config.lam_tilde)
    body, heart = config.resolve_meshes()
    _check_interface(body, heart)
    report = PipelineReport(config)
    report.residuals["symbol_margin"] = margin
    f = boundary_data(body, OUTER, config.data, op_e.k, config.base_dir)

    t0 = time.perf_counter()
    report.stage = "cauchy"
    try:
        delta = None
        if config.noise_level > 0:
            f, delta = add_noise(f, config.noise_level, config.seed)
            report.delta = delta
        if config.method == ALTERNATING:
            sol = solve_alternating(op_b, body, f, config.max_iter, config.stop_tol)
        elif delta is not None and delta > 0 and config.alpha is None:
            _, sol, table = select_alpha_discrepancy(op_b, body, f, delta, config.tau, tol=config.tol)
            report.sweep = [asdict(e) for e in table]
        else:
            sol = solve_tikhonov(op_b, body, f, config.alpha, tol=config.tol,
                                 cauchy_op=CauchyOperator(op_b, body))
    except SolverError as exc:
        report.sweep = [asdict(e) for e in getattr(exc, "table", [])]
        raise PipelineError(f"Cauchy step failed: {exc}", report, "cauchy", exc) from exc
    report.cauchy = sol
    report.timings["cauchy"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    report.stage = "compatibility"
    report.trace_heart = transfer_boundary_field(sol.trace_inner, heart, INNER)
    report.flux_heart = transfer_boundary_field(sol.flux_inner, heart, INNER)
    # outward normal of the heart is the inward normal of the body: flip once
    report.h0 = -report.flux_heart
    try:
        kernel = kernel_basis(op_e, heart, config.eps_ker, tag=INNER)
    except SolverError as exc:
        raise PipelineError(f"kernel detection failed: {exc}", report, "compatibility", exc) from exc
    report.kernel_dimension = kernel.dimension
    report.normalization = (f"{kernel.inner_product}-L2 orthogonal to kernel"
                            if kernel.dimension else "none (trivial kernel)")
    report.defect = compatibility_defect(report.h0, kernel, floor=boundary_l2_norm(f))
    if report.defect > config.ctol:
        exc = CompatibilityError(
            f"Step-2 data violates the solvability condition: defect {report.defect:.3e} "
            f"> ctol {config.ctol:.1e}", report.defect, config.ctol)
        raise PipelineError(str(exc), report, "compatibility", exc)

    report.stage = "neumann"
    try:
        h = solve_neumann(op_e, heart, report.h0, tol=config.tol, ctol=math.inf, kernel=kernel)
    except SolverError as exc:
        raise PipelineError(f"Neumann step failed: {exc}", report, "neumann", exc) from exc
    report.h = h
    report.h_trace = h.trace(INNER)
    report.residuals["neumann_residual"] = neumann_residual(op_e, h, report.h0)
    report.residuals["orthogonality_residual"] = orthogonality_residual(h, kernel)
    report.timings["neumann"] = time.perf_counter() - t0

    report.stage = "transmembrane"
    report.v = transmembrane_potential(report.h_trace, report.trace_heart, config.lam)
    report.stage = "done"
    return report
