from typing import Dict, List, Optional


class MergeError(Exception):
    """Base for every failure the merge pipeline reports to its caller."""

    exit_code = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class InvalidPartition(MergeError):
    pass


class DuplicatePointInPartition(MergeError):
    pass


class HashCollision(MergeError):
    pass


class DegenerateGeometry(MergeError):
    pass


class DisconnectedGraph(MergeError):
    """A partition's point graph falls apart into several components."""

    def __init__(self, message: str, component_sizes: List[int], stage: Optional[str] = None):
        super().__init__(message, stage)
        self.component_sizes = component_sizes


class DisconnectedPartitionGraph(MergeError):
    """The partitions do not form one connected overlap graph."""

    exit_code = 2

    def __init__(self, message: str, components: List[List[int]], stage: Optional[str] = None):
        super().__init__(message, stage)
        self.components = components


class SingularSystem(MergeError):
    pass


class EmptyBoundary(MergeError):
    pass


class ConvergenceFailure(MergeError):
    exit_code = 3

    def __init__(
        self,
        message: str,
        residual: float,
        iterations: int,
        stage: Optional[str] = None,
    ):
        super().__init__(message, stage)
        self.residual = residual
        self.iterations = iterations


class InvalidConfig(MergeError):
    pass


class IdMismatch(MergeError):
    pass


class FormatError(MergeError):
    pass


def error_payload(err: MergeError) -> Dict[str, object]:
    """JSON-ready description of an error for --json output."""
    payload: Dict[str, object] = {
        "error": err.message,
        "stage": err.stage,
        "type": type(err).__name__,
        "exit_code": err.exit_code,
    }
    if isinstance(err, DisconnectedPartitionGraph):
        payload["components"] = err.components
    if isinstance(err, ConvergenceFailure):
        payload["residual"] = err.residual
        payload["iterations"] = err.iterations
    return payload
