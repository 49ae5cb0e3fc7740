"""Finite element toolkit for reconstructing transmembrane potentials from body-surface data."""

__version__ = "0.1.0"

from .errors import CompatibilityError, InputError, KernelError, SolverError  # noqa: E402

__all__ = ["CompatibilityError", "InputError", "KernelError", "SolverError", "__version__"]
