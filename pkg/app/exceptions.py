from typing import Optional


class SpectralError(Exception):
    """
    Base error; exit_code is what the CLI returns when it escapes a command
    """
    exit_code = 3


class InputError(SpectralError):
    exit_code = 2


class ConfigError(InputError):
    pass


class DatasetError(InputError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DimensionError(InputError):
    pass


class KernelAssumptionError(InputError):
    pass


class InsufficientDataError(InputError):
    pass


class ShortfallError(InputError):
    def __init__(self, requested: int, available: int):
        self.requested = requested
        self.available = available
        super().__init__(
            f"Requested {requested} eigenvectors but only {available} informative ones are available"
        )


class SolverDivergence(SpectralError):
    def __init__(self, message: str, residual: float = float("nan")):
        self.residual = residual
        super().__init__(f"{message} (last residual {residual:.3e})")


class PoleError(SpectralError):
    pass


class SpectralRadiusError(SpectralError):
    pass


class DegenerateSpikeError(SpectralError):
    pass


class NonInformativeError(SpectralError):
    pass


class ExtractionError(SpectralError):
    pass


class FactorizationError(SpectralError):
    pass


class DegreeError(SpectralError):
    def __init__(self, index: int, degree: float):
        self.index = index
        self.degree = degree
        super().__init__(f"Nonpositive degree {degree:.6g} at sample {index}")


class UndefinedScoreError(SpectralError):
    pass
