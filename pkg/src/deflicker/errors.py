"""Exception types raised across the package."""


class DeflickerError(Exception):
    """Base class for all package errors."""


class NoFramesError(DeflickerError):
    pass


class DimensionMismatchError(DeflickerError, ValueError):
    pass


class DecodeError(DeflickerError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        msg = f"cannot decode {self.path}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class ShapeError(DeflickerError, ValueError):
    pass


class EmptyMaskError(DeflickerError):
    pass


class FrameTooSmallError(DeflickerError, ValueError):
    pass


class WindowTooShortError(DeflickerError, ValueError):
    pass


class MissingFlowError(DeflickerError, KeyError):
    def __init__(self, src, dst):
        self.src, self.dst = src, dst
        super().__init__(f"no flow available for pair ({src} -> {dst})")

    def __str__(self):
        return self.args[0]


class MissingOutputError(DeflickerError):
    pass


class SpecError(DeflickerError, ValueError):
    pass


class NonFiniteLossError(DeflickerError, FloatingPointError):
    def __init__(self, terms):
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss ({detail})")


class FlowFormatError(DeflickerError):
    pass
