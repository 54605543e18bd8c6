"""Exception types raised across the package."""


class FlowInsError(Exception):
    """Base class for all package errors."""


class DegenerateGeometry(FlowInsError):
    """Two-view geometry carries no usable depth information."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ProjectionError(FlowInsError):
    """Point lies on or behind the camera plane."""


class NonpositiveDt(FlowInsError, ValueError):
    pass


class CovarianceNotPSD(FlowInsError):
    pass


class NotStationary(FlowInsError):
    pass


class SingularInnovation(FlowInsError):
    pass


class SingularPrediction(RuntimeWarning):
    """Predicted covariance needed jitter before it could be factorized."""


class InconsistentStack(FlowInsError, ValueError):
    pass


class ParseError(FlowInsError, ValueError):
    """Malformed dataset file.  Carries the file and line/offset."""

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line
        self.offset = offset


class EmptyOverlap(FlowInsError):
    pass


class DegenerateAlignment(FlowInsError):
    pass
