"""Exception hierarchy shared across the package.

Every class derives from ``TraceDetError`` and carries the CLI exit code that
the command-line front end maps it to.
"""


class TraceDetError(Exception):
    exit_code = 1


class ValidationError(TraceDetError, ValueError):
    """An invariant or precondition on an input value does not hold."""

    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ParseError(TraceDetError, ValueError):
    exit_code = 2

    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ShapeError(TraceDetError, ValueError):
    exit_code = 2

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class UndefinedMetricError(TraceDetError, ValueError):
    exit_code = 2


class NumericalAbort(TraceDetError, FloatingPointError):
    exit_code = 3


class ArtifactMismatch(TraceDetError):
    exit_code = 4


class GradcheckFailure(TraceDetError):
    exit_code = 5
