"""
Error hierarchy shared by the engine, the analyses, the CLI and the server.

exit_code maps straight onto the CLI contract:
  2 -> validation (bad input, unsupported option, inconsistent data)
  3 -> estimation (a cutoff or boundary point could not be estimated)
"""

from typing import List, Optional


class RdmultiError(Exception):
    exit_code = 1


class ValidationError(RdmultiError):
    exit_code = 2


class DataParseError(ValidationError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class UnsupportedOptionError(ValidationError):
    def __init__(self, option: str):
        super().__init__(f"unsupported option: {option}")
        self.option = option


class DataConsistencyError(ValidationError):
    def __init__(self, message: str, rows: Optional[List[int]] = None):
        super().__init__(message)
        self.rows = rows or []


class EstimationError(RdmultiError):
    exit_code = 3

    def __init__(self, message: str, label: Optional[str] = None):
        super().__init__(message)
        self.label = label

    def with_label(self, label: str) -> "EstimationError":
        """Re-raise helper: same error class, message prefixed by the failing cutoff/point."""
        err = self.__class__(f"{label}: {self}", label=label)
        return err


class InsufficientDataError(EstimationError):
    pass


class CollinearityError(EstimationError):
    pass


class OneSidedSupportError(EstimationError):
    pass


class BandwidthError(EstimationError):
    pass
