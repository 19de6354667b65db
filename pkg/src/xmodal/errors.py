"""Exception hierarchy.

Each top-level family maps onto a CLI exit code: configuration problems (1),
data problems (2) and runtime failures such as a NaN loss (3).
"""
from __future__ import annotations


class XModalError(Exception):
    exit_code = 3


class ConfigError(XModalError):
    exit_code = 1


class DataError(XModalError):
    exit_code = 2


class ManifestParseError(DataError):
    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class ManifestValidationError(DataError):
    def __init__(self, field: str, message: str, lineno: int | None = None) -> None:
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{field}: {message}")
        self.field = field
        self.lineno = lineno


class TooShortError(DataError):
    pass


class AlignmentError(DataError):
    pass


class FormatError(DataError):
    """Wrong magic bytes or unsupported version in a binary file."""


class CorruptionError(DataError):
    """Binary file is truncated or internally inconsistent."""


class DistributionError(DataError, ValueError):
    """A row that should be a probability distribution is not one."""


class UndefinedAUCError(DataError):
    pass


class ProtocolError(DataError):
    pass


class ContractError(XModalError, ValueError):
    """Shape or length contract violated by a caller."""


class CheckpointMismatchError(ConfigError):
    pass


class NaNLossError(XModalError):
    def __init__(self, batch_ids: list[str], epoch: int, step: int) -> None:
        super().__init__(f"non-finite loss at epoch {epoch} step {step}; batch={batch_ids}")
        self.batch_ids = batch_ids
        self.epoch = epoch
        self.step = step
