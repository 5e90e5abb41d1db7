"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform; message carries both shapes."""


class NumericError(ArithmeticError):
    """An operation produced NaN/Inf or was evaluated outside its domain."""


class TapeError(RuntimeError):
    """Gradient tape misuse: non-scalar loss, double backward, reuse."""


class ConfigError(ValueError):
    """Invalid configuration or unanswerable question/strategy setup."""


class GenerationError(RuntimeError):
    """Prompt generation failed; carries the affected identity id(s)."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending line/field."""


class EvaluationError(RuntimeError):
    """Retrieval evaluation is impossible (e.g. no query has a match)."""
