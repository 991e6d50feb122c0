class ForelemError(Exception):
    """Base class for every error raised by the forelem package."""


class SchemaMismatch(ForelemError, ValueError):
    def __init__(self, index: int, reason: str):
        self.index = index
        super().__init__(f"tuple {index} does not conform to schema: {reason}")


class UnknownField(ForelemError, KeyError):
    def __init__(self, name: str, where: str = ""):
        self.name = name
        super().__init__(f"unknown field {name!r}" + (f" in {where}" if where else ""))

    def __str__(self) -> str:
        return self.args[0]


class NotIndexField(ForelemError, ValueError):
    pass


class UnknownSpace(ForelemError, KeyError):
    def __str__(self) -> str:
        return self.args[0]


class ArityMismatch(ForelemError, ValueError):
    pass


class KindMismatch(ForelemError, TypeError):
    pass


class DimMismatch(ForelemError, ValueError):
    pass


class DivByZero(ForelemError, ZeroDivisionError):
    def __init__(self, message: str, tuple_ref=None):
        self.tuple_ref = tuple_ref
        super().__init__(message)

    def with_tuple(self, tuple_ref) -> "DivByZero":
        return DivByZero(f"{self.args[0]} (tuple {tuple_ref})", tuple_ref)


class NotLocalizable(ForelemError, ValueError):
    pass


class NotReducible(ForelemError, ValueError):
    pass


class NotPerfectlyNested(ForelemError, ValueError):
    pass


class NotMaterialized(ForelemError, ValueError):
    pass


class LayoutUnsupported(ForelemError, ValueError):
    pass


class EmptyReservoir(ForelemError, ValueError):
    pass


class EmptyGraph(ForelemError, ValueError):
    pass


class OwnershipViolation(ForelemError, PermissionError):
    pass


class AssertionUnsatisfiable(ForelemError, ValueError):
    pass


class NoConvergence(ForelemError, RuntimeError):
    pass


class SweepBudgetExhausted(ForelemError, RuntimeError):
    pass


class UnknownVariant(ForelemError, KeyError):
    def __str__(self) -> str:
        return self.args[0]


class PipelineError(ForelemError):
    """A transformation failed inside a pipeline; carries the step position."""

    def __init__(self, position: int, step: str, cause: Exception):
        self.position = position
        self.step = step
        self.cause = cause
        super().__init__(f"pipeline step {position} ({step}) failed: {cause}")


class WrongLoopKind(ForelemError, ValueError):
    pass
