"""Exception types raised by the library."""


class UVGraspError(Exception):
    """Base class for all library errors."""

    code = "UVGraspError"


class NonPositiveDepth(UVGraspError, ValueError):
    code = "NonPositiveDepth"


class EmptyMesh(UVGraspError, ValueError):
    code = "EmptyMesh"


class NotWatertight(UVGraspError, ValueError):
    code = "NotWatertight"


class InvalidMesh(UVGraspError, ValueError):
    code = "InvalidMesh"


class ParseError(UVGraspError, ValueError):
    code = "ParseError"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingUV(UVGraspError, ValueError):
    code = "MissingUV"


class EmptyResolution(UVGraspError, ValueError):
    code = "EmptyResolution"


class NoValidSupport(UVGraspError, ValueError):
    code = "NoValidSupport"


class DimensionMismatch(UVGraspError, ValueError):
    code = "DimensionMismatch"


class CountMismatch(UVGraspError, ValueError):
    code = "CountMismatch"


class TooSmall(UVGraspError, ValueError):
    code = "TooSmall"


class TooFewSamples(UVGraspError, ValueError):
    code = "TooFewSamples"


class RankDeficient(UVGraspError, ValueError):
    code = "RankDeficient"


class NonFiniteObjective(UVGraspError, ArithmeticError):
    code = "NonFiniteObjective"


class UnknownKind(UVGraspError, ValueError):
    code = "UnknownKind"


class InfeasiblePenetration(UVGraspError, ValueError):
    code = "InfeasiblePenetration"


class FormatError(UVGraspError, ValueError):
    code = "FormatError"
