"""Exception hierarchy shared by every ccat module."""


class CCATError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(CCATError):
    pass


class UnsupportedFormat(CCATError):
    pass


class TooShort(CCATError):
    pass


class ShapeError(CCATError):
    pass


class ConfigError(CCATError):
    pass


class AllMasked(CCATError):
    pass


class EmptyInput(CCATError):
    pass


class FormatError(CCATError):
    pass


class CorruptCheckpoint(CCATError):
    pass


class LabelError(CCATError):
    pass


class EmptyBatch(CCATError):
    pass


class DivergenceError(CCATError):
    pass


class DegenerateInput(CCATError):
    pass


class TooFewPoints(CCATError):
    pass


class EmptyEnsemble(CCATError):
    pass
