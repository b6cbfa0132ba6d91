"""Exception hierarchy shared across the package."""


class ExpertFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(ExpertFlowError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ExpertFlowError, ValueError):
    """A precondition of an operation was violated."""


class DomainError(ExpertFlowError, ValueError):
    """A value lies outside the domain an encoder can represent."""


class ParseError(ExpertFlowError, ValueError):
    """A token stream does not follow the event grammar.

    ``index`` is the offending token position, ``expected`` names the token
    category the parser was waiting for.
    """

    def __init__(self, message, index, expected):
        super().__init__(f"{message} at token {index} (expected {expected})")
        self.index = index
        self.expected = expected


class RoutingError(ExpertFlowError, ValueError):
    """A token cannot be scored against the expert table."""


class ConfigError(ExpertFlowError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class GenerationError(ExpertFlowError, ValueError):
    """A synthetic sample cannot be generated from the given settings."""


class NonFiniteLossError(ExpertFlowError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, parts=None):
        super().__init__(message)
        self.parts = dict(parts or {})


class CheckpointError(ExpertFlowError, ValueError):
    """Checkpoint bytes are malformed or from an unsupported version."""
