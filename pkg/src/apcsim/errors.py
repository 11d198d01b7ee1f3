"""Exception hierarchy shared by every subsystem."""


class ApcError(Exception):
    """Base class for all errors raised by apcsim."""


class ShapeMismatch(ApcError, ValueError):
    pass


class NonFinite(ApcError, ArithmeticError):
    pass


class EmptyTape(ApcError, RuntimeError):
    pass


class LabelOutOfRange(ApcError, IndexError):
    pass


class DivergedTraining(ApcError, ArithmeticError):
    """Loss became NaN/Inf during training; usually the learning rate is too high."""


class FormatError(ApcError, ValueError):
    """A file or record does not follow the expected binary/text format."""


class ZeroElapsed(ApcError, ZeroDivisionError):
    pass


class MemoryFull(ApcError, RuntimeError):
    pass


class FsmViolation(ApcError, RuntimeError):
    pass


class DegenerateGradient(ApcError, ArithmeticError):
    """All candidate logit-difference gradients vanished."""


class IntegrityError(ApcError):
    """A trace record failed checksum verification."""


class MissingMetric(ApcError, KeyError):
    pass


class LayoutMismatch(ApcError, ValueError):
    pass


class SingleClassDataset(ApcError, ValueError):
    pass
