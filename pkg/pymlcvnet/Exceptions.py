class MLCVNetError(Exception):
    """Root of every error raised by pymlcvnet."""


class ArgumentError(MLCVNetError, ValueError):
    """Exception for violated preconditions on operation arguments."""
    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details


class ShapeError(ArgumentError):
    """Exception for incompatible tensor or matrix shapes."""
    def __init__(self, op, shape_a, shape_b):
        super().__init__(f'{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}.',
                         details={'op': op, 'shapes': (tuple(shape_a), tuple(shape_b))})
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)


class ConfigError(ArgumentError):
    """Exception for unknown keys or invalid values in a configuration record."""
    def __init__(self, message, valid_keys=None):
        super().__init__(message, details=valid_keys)
        self.valid_keys = valid_keys


class SceneGenerationError(ArgumentError):
    """Exception for scene generator preconditions."""


class DecodeError(MLCVNetError):
    """Exception for proposals that cannot be decoded into a box."""
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NonFiniteGradientError(MLCVNetError):
    """Exception for an optimizer step with NaN or Inf gradients."""
    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class TrainingDivergedError(MLCVNetError):
    """Exception for a training run whose loss became non-finite."""
    def __init__(self, message, epoch, checkpoint_path=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint_path = checkpoint_path


class ParseError(MLCVNetError):
    """
    Exception for malformed input files.

    Attributes:
        path -- file being parsed
        line -- 1-based line number (text formats), or None
        field -- offending field name (JSON formats), or None
    """
    def __init__(self, message, path=None, line=None, field=None):
        location = ''
        if line is not None:
            location = f' (line {line})'
        elif field is not None:
            location = f' (field {field!r})'
        super().__init__(f'{path}: {message}{location}' if path else f'{message}{location}')
        self.path = path
        self.line = line
        self.field = field


class UnsupportedFormatError(MLCVNetError):
    """Exception for checkpoints with a wrong magic number or version."""


class CorruptCheckpointError(MLCVNetError):
    """Exception for truncated or otherwise damaged checkpoints."""
