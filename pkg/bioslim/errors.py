class BioslimError(Exception):
    """Root of every pipeline failure; the CLI maps it to exit code 2."""


class ConfigError(BioslimError):
    """Invalid run configuration; the CLI maps it to exit code 1."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class LengthMismatch(BioslimError):
    pass


class OutOfBounds(BioslimError):
    pass


class ShapeError(BioslimError):
    pass


class ShapeMismatch(ShapeError):
    pass


class ShapeConflict(ShapeError):
    def __init__(self, node_id: str, detail: str):
        self.node_id = node_id
        super().__init__(f"{node_id}: {detail}")


class NonPreservingGraph(ShapeError):
    pass


class GraphInvalid(BioslimError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CycleDetected(GraphInvalid):
    def __init__(self, node_ids):
        self.node_ids = list(node_ids)
        super().__init__([f"cycle detected through {', '.join(self.node_ids)}"])


class UnfoldableBatchNorm(GraphInvalid):
    pass


class ModelFileError(BioslimError):
    pass


class BadMagic(ModelFileError):
    pass


class ChecksumMismatch(ModelFileError):
    pass


class UnknownOpKind(ModelFileError):
    pass


class AccumulatorOverflow(BioslimError):
    pass


class MissingInput(BioslimError):
    pass


class BadOverlap(BioslimError):
    pass


class EmptyTensor(BioslimError):
    pass


class CalibrationError(BioslimError):
    pass


class MissingParams(BioslimError):
    pass


class PlanViolatesGroups(BioslimError):
    pass


class WouldEmptyLayer(BioslimError):
    pass


class UnsupportedForTraining(BioslimError):
    pass


class DegenerateInput(BioslimError):
    pass


class PlacementFailure(BioslimError):
    pass


class CounterUnavailable(BioslimError):
    pass
