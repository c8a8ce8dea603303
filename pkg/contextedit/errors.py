class ContextEditError(ValueError):
    """Base class for all errors raised by contextedit."""

    code = "error"


class DimensionError(ContextEditError):
    code = "dimension"


class NumericalError(ContextEditError):
    code = "numerical"


class ContractError(ContextEditError):
    code = "contract"


class TokenizationError(ContextEditError):
    code = "tokenization"


class GenerationError(ContextEditError):
    code = "generation"


class DatasetError(ContextEditError):
    code = "dataset"


class CheckpointError(ContextEditError):
    code = "checkpoint"


class PhaseOrderError(ContextEditError):
    code = "phase-order"


class ConfigError(ContextEditError):
    code = "config"
