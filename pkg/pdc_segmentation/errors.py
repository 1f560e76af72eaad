from typing import Iterable, Optional, Sequence


class PdcError(Exception):
    exit_code: int = 3


class ConfigurationError(PdcError):
    exit_code = 1


class DataError(PdcError):
    exit_code = 2


class NormalizationError(DataError):

    def __init__(self, message: str, sample_id: str):
        super().__init__(message)
        self.sample_id = sample_id


class ShapeError(PdcError):

    def __init__(self, message: str, shape: Optional[Sequence[int]] = None, divisor: Optional[int] = None):
        super().__init__(message)
        self.shape = tuple(shape) if shape is not None else None
        self.divisor = divisor


class PairingError(PdcError):
    pass


class AlignmentError(PdcError):
    pass


class EmptyMaskError(PdcError):
    pass


class CheckpointError(PdcError):
    pass


class ReportError(PdcError):

    def __init__(self, message: str, missing: Iterable[str]):
        super().__init__(message)
        self.missing = list(missing)
