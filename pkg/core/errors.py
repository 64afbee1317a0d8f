from typing import Optional, Sequence


class MfmlError(Exception):
    """Base error; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1

    def __init__(self, message: str, stage: Optional[str] = None) -> None:
        super().__init__(message)
        self.message = message
        self.stage = stage

    def with_stage(self, stage: str) -> "MfmlError":
        if self.stage is None:
            self.stage = stage
        return self

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class ConfigError(MfmlError):
    exit_code = 1


class DataError(MfmlError):
    exit_code = 2


class MeshError(DataError):
    pass


class MeshParseError(MeshError):
    def __init__(self, message: str, line: Optional[int] = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(MfmlError):
    exit_code = 3


class SpectralError(NumericError):
    def __init__(self, message: str, residuals: Sequence[float] = ()) -> None:
        super().__init__(message)
        self.residuals = list(residuals)


class SignatureError(NumericError):
    pass


class CodingError(NumericError):
    pass


class TrainingError(NumericError):
    pass
