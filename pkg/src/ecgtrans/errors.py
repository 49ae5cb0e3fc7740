"""Exception hierarchy shared by all modules."""


class InputError(ValueError):
    """Invalid arguments, malformed files, shape mismatches."""


class SolverError(RuntimeError):
    """A numerical solve failed to reach its tolerance.

    ``history`` holds the residual norms recorded up to the failure.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class KernelError(SolverError):
    """Kernel detection failed: kernel too large or no clear spectral gap.

    Either case means the discrete Neumann problem does not look Fredholm
    (Shapiro-Lopatinsky suspect).
    """

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = list(eigenvalues) if eigenvalues is not None else []


class CompatibilityError(SolverError):
    """Neumann data is not orthogonal to the kernel within ``ctol``."""

    def __init__(self, message, defect, ctol):
        super().__init__(message)
        self.defect = defect
        self.ctol = ctol
