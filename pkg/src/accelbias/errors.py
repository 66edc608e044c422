"""Exception hierarchy shared by all modules."""


class CalibrationError(Exception):
    """Base class for every error raised by accelbias."""


class InvalidArgumentError(CalibrationError, ValueError):
    pass


class InsufficientDataError(CalibrationError, ValueError):
    pass


class ParseError(CalibrationError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.path = path


class RankDeficientError(CalibrationError):
    """The linearised gravity-norm system does not determine all three axes."""

    def __init__(self, rank, message=None):
        super().__init__(message or f"design matrix is rank deficient (rank {rank} < 3)")
        self.rank = rank


class SingularResidualError(CalibrationError):
    pass


class ShapeError(CalibrationError, ValueError):
    pass


class StateError(CalibrationError):
    pass


class DegenerateVarianceError(CalibrationError):
    """Paired differences have zero spread, so the t statistic is undefined."""


class NonFiniteGradientError(CalibrationError, FloatingPointError):
    def __init__(self, tensor):
        super().__init__(f"non-finite gradient in tensor {tensor!r}")
        self.tensor = tensor


class DivergenceError(CalibrationError):
    def __init__(self, message, checkpoint=None):
        if checkpoint is not None:
            message = f"{message} (last good checkpoint: {checkpoint})"
        super().__init__(message)
        self.checkpoint = checkpoint
