"""Exception taxonomy shared across the package."""


class DeoccError(Exception):
    """Base class; carries a machine-readable category for the CLI."""

    category = "error"


class ValidationError(DeoccError):
    category = "validation"


class PlacementError(ValidationError):
    category = "placement"


class SynthesisError(DeoccError):
    category = "synthesis"


class SampleFormatError(DeoccError):
    category = "sample-format"


class TrainingError(DeoccError):
    category = "training"


class ModelMismatchError(DeoccError):
    category = "model-mismatch"
