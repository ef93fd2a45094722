class ShapeError(ValueError):
    """Dimension or length mismatch between arrays, batches or parameters."""


class ConfigError(ValueError):
    """Invalid experiment or distribution configuration."""


class NumericalError(FloatingPointError):
    """Non-finite values produced during training; ``context`` says where."""

    def __init__(self, message: str, **context):
        self.context = context
        if context:
            message = f"{message} ({', '.join(f'{k}={v}' for k, v in context.items())})"
        super().__init__(message)


class EnumerationTooLarge(ValueError):
    """Exhaustive trajectory enumeration would exceed the configured guard."""


class AlignmentError(ValueError):
    """Checkpoint or log streams do not share an iteration index."""


class DomainError(ValueError):
    """Argument outside the admissible set (e.g. delta outside its interval)."""
