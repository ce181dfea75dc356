"""Exception hierarchy shared by every sigstyle module."""


class SigStyleError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SigStyleError, ValueError):
    pass


class DimensionError(SigStyleError, ValueError):
    pass


class NumericInputError(SigStyleError, ValueError):
    """A tensor handed to the library contains NaN or inf."""


class NumericError(SigStyleError, ArithmeticError):
    """A computation produced a non-finite value.

    ``step`` carries the sampler or optimizer step at which it happened.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TimestepError(SigStyleError, ValueError):
    pass


class UnknownTokenError(SigStyleError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown token"


class UnknownTargetError(SigStyleError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown target"


class UnknownAddressError(SigStyleError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown address"


class CheckpointParseError(SigStyleError, ValueError):
    pass


class IncompatibleCheckpointError(SigStyleError, ValueError):
    pass


class TraceIncompatibleError(SigStyleError, ValueError):
    pass


class TraceGapError(SigStyleError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing trace entry"


class TraceValidationError(SigStyleError, ValueError):
    """An injected attention map is not row-stochastic."""


class PromptError(SigStyleError, ValueError):
    pass


class CaptionerError(SigStyleError, RuntimeError):
    pass


class CapabilityError(SigStyleError, RuntimeError):
    """An optional adapter (pretrained weights, extra package) is unavailable."""


class ImageSizeError(SigStyleError, ValueError):
    pass


class TrainingAborted(NumericError):
    """Fine-tuning hit a non-finite loss; ``last_good`` holds the prior state."""

    def __init__(self, message, step=None, last_good=None):
        super().__init__(message, step)
        self.last_good = last_good
