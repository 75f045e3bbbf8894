"""Exception types shared across the package."""


class MeshRLError(Exception):
    pass


class ValidationError(MeshRLError, ValueError):
    """Bad input: wrong shape, out-of-range field, inconsistent config."""


class NumericError(MeshRLError, ArithmeticError):
    """Non-finite values, divergence, singular systems."""


class FormatError(MeshRLError, ValueError):
    """Malformed file on disk (CSV, weight file, run file)."""


class MetricError(MeshRLError, ArithmeticError):
    pass
