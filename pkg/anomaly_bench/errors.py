class AnomalyBenchError(Exception):
    """Base class of every error raised by anomaly_bench."""


class ConfigError(AnomalyBenchError):
    pass


class IngestionError(AnomalyBenchError):
    def __init__(self, path, reason: str):
        self.path = path
        super().__init__(f"Could not read {path}: {reason}")


class ValidationError(AnomalyBenchError):
    pass


class PlacementError(AnomalyBenchError):
    pass


class IntegrityError(AnomalyBenchError):
    pass


class EmptyDatasetError(AnomalyBenchError):
    pass


class DegenerateSliceError(AnomalyBenchError):
    pass


class ContractError(AnomalyBenchError):
    pass


class DivergenceError(AnomalyBenchError):
    def __init__(self, message: str, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)


class DegenerateLabelError(AnomalyBenchError):
    pass


class UndefinedAUCError(AnomalyBenchError):
    pass
