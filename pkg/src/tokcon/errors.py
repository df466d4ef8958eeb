"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
0 / 1 (validation or config) / 2 (runtime or data).
"""


class TokconError(Exception):
    exit_code = 2


class ValidationError(TokconError):
    exit_code = 1


class ConfigError(ValidationError):
    pass


class PolicyError(ValidationError):
    pass


class VocabError(ValidationError):
    pass


class ShapeError(TokconError):
    pass


class FormatError(TokconError):
    pass


class UnsupportedError(FormatError):
    pass


class InputTooShortError(TokconError):
    pass


class EmptyInputError(TokconError):
    pass


class AlignmentError(TokconError):
    pass


class DataError(TokconError):
    pass


class DegenerateEmbeddingError(TokconError):
    pass


class DivergenceError(TokconError):
    pass
