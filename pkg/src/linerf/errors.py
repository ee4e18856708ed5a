"""Exception taxonomy shared across the package."""


class LinerfError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LinerfError):
    """Invalid model/run configuration: bad shapes, unknown keys, illegal combinations."""


class InputError(LinerfError):
    """Invalid runtime input: non-unit directions, negative densities, bad ranges."""


class TrainingError(LinerfError):
    """Non-finite loss or gradients during optimization."""


class DataError(LinerfError):
    """Dataset ingestion/validation failure (missing files, mixed resolutions, bad poses)."""


class FormatError(LinerfError):
    """Malformed binary file (image or checkpoint)."""


class VerificationError(LinerfError):
    """A numerical claim checked by the verifier failed beyond tolerance."""
