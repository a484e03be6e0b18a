"""Exception hierarchy shared across the pipeline."""


class FedFlowError(Exception):
    """Base class for all pipeline errors."""


class ParseError(FedFlowError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ReferentialError(FedFlowError):
    pass


class OrderingError(FedFlowError):
    pass


class DegenerateGeometryError(FedFlowError):
    pass


class EmptyCorridorError(FedFlowError):
    pass


class UndefinedSilhouetteError(FedFlowError):
    pass


class DegenerateDataError(FedFlowError):
    pass


class InsufficientPopulationError(FedFlowError):
    pass


class SelectionEmptyError(FedFlowError):
    pass


class InsufficientCandidatesError(FedFlowError):
    pass


class MissingHourError(FedFlowError):
    pass


class RankError(FedFlowError):
    pass


class DimensionError(FedFlowError):
    pass


class DivergenceError(FedFlowError):
    def __init__(self, step, loss, client_id=None):
        self.step = step
        self.loss = loss
        self.client_id = client_id
        who = f"client {client_id}: " if client_id is not None else ""
        super().__init__(f"{who}non-finite loss {loss!r} at step {step}")


class CheckpointMismatchError(FedFlowError):
    pass


class ShapeMismatchError(FedFlowError):
    pass


class ZeroSamplesError(FedFlowError):
    pass


class EmptyEvaluationError(FedFlowError):
    pass


class OverlapError(FedFlowError):
    pass


class SampleSizeError(FedFlowError):
    pass
