"""Exception types shared across the benchmark."""


class ConfigError(ValueError):
    """Invalid configuration value, schema violation or unknown key."""


class ShapeError(ValueError):
    """Tensor/array shapes incompatible with the requested operation."""


class DimensionError(ValueError):
    """Vector dimension mismatch (e.g. codebook vs latent channels)."""


class RangeError(ValueError):
    """Scalar argument outside its documented range."""


class EmptyMaskError(ValueError):
    """Label mask contains no cardiac pixels where some are required."""


class DegenerateFitError(ValueError):
    """Too few samples to determine the requested fit."""


class DegenerateRangeError(ValueError):
    """Intensity percentiles coincide; normalization undefined."""


class ScaleError(ValueError):
    """Image too small for the requested number of metric scales."""


class SampleSizeError(ValueError):
    """Statistical test invoked with too few samples."""


class EmptyGroupError(ValueError):
    """Score group required to be non-empty is empty."""


class ProtocolError(ValueError):
    """Evaluation protocol under-specified (e.g. no corruption levels)."""


class SplitLeakError(ValueError):
    """Holdout set intersects the training set."""


class HashError(ValueError):
    """Feature sets or models carry mismatching / missing freeze hashes."""


class ProvenanceError(ValueError):
    """A dependent checkpoint was produced against a different artifact."""


class FormatError(ValueError):
    """Persisted file is malformed or has an unsupported version."""


class HashMismatchError(FormatError):
    """Persisted payload does not match its recorded content hash."""


class UsageError(ValueError):
    """Command line invoked with an unusable argument combination."""


class StageError(RuntimeError):
    """A pipeline stage cannot run, typically missing prerequisite artifacts."""


class NonFiniteLossError(RuntimeError):
    """Training loss became NaN or infinite."""


class NonFiniteStateError(RuntimeError):
    """ODE state diverged to NaN or infinity during integration."""


class SingularityWarning(UserWarning):
    """Covariance square root needed non-trivial eigenvalue clipping."""
