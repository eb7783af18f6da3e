"""Exception types raised across the package."""


class ValidationError(ValueError):
    """Input data violates a documented contract (unknown label, bad span, ...)."""


class CorpusParseError(ValidationError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ConfigurationError(ValueError):
    """A configuration value is out of range or inconsistent."""


class NumericError(FloatingPointError):
    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite.

    ``checkpoint`` holds the last parameters whose loss was finite.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class RemoteAnnotatorError(RuntimeError):
    pass
