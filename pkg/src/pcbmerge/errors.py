"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
stable contract: 2 for validation problems, 3 for I/O and file-format
problems, 4 for fitness evaluation failures.
"""

from __future__ import annotations


class MergeError(Exception):
    exit_code = 1

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class ValidationError(MergeError):
    exit_code = 2


class ConfigError(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    def __init__(self, name: str, detail: str = ""):
        self.name = name
        super().__init__(f"shape mismatch for tensor {name!r}" + (f": {detail}" if detail else ""))


class DtypeMismatch(ValidationError):
    def __init__(self, name: str, detail: str = ""):
        self.name = name
        super().__init__(f"dtype class mismatch for tensor {name!r}" + (f": {detail}" if detail else ""))


class MissingTensor(ValidationError):
    def __init__(self, name: str, index: int):
        self.name = name
        self.index = index
        super().__init__(f"tensor {name!r} missing from checkpoint #{index}")


class SchemaMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


class InfeasibleSupports(ValidationError):
    pass


class CheckpointIOError(MergeError):
    exit_code = 3


class IoFailure(CheckpointIOError):
    pass


class CheckpointFormatError(CheckpointIOError):
    pass


class MalformedHeader(CheckpointFormatError):
    pass


class OverlappingOffsets(CheckpointFormatError):
    pass


class UnsupportedDtype(CheckpointFormatError):
    pass


class FitnessFailure(MergeError):
    exit_code = 4

    def __init__(self, message: str, params=None):
        self.params = None if params is None else [float(p) for p in params]
        super().__init__(message if params is None else f"{message} (params={self.params})")


class EvaluationTimeout(FitnessFailure):
    pass


class NonZeroExit(FitnessFailure):
    def __init__(self, code: int, stderr_tail: str):
        self.code = code
        self.stderr_tail = stderr_tail
        super().__init__(f"evaluator exited with code {code}: {stderr_tail}")


class UnparsableOutput(FitnessFailure):
    pass


class NonFiniteFitness(FitnessFailure):
    pass
