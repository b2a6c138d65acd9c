"""Exception hierarchy shared by every module."""


class FfnError(Exception):
    pass


class ShapeMismatch(FfnError, ValueError):
    pass


class NonFinite(FfnError, ArithmeticError):
    pass


class CorruptCheckpoint(FfnError):
    pass


class SpecMismatch(FfnError):
    pass


class CorruptFile(FfnError):
    pass


class CountMismatch(FfnError):
    pass


class EmptyDataset(FfnError, ValueError):
    pass


class EmptyImage(FfnError, ValueError):
    pass
