"""Exception hierarchy shared by every complexqa module."""


class ComplexQAError(Exception):
    """Base class for all package errors."""


# structure parsing
class MalformedRecord(ComplexQAError):
    pass


class EmptyStructure(ComplexQAError):
    pass


class DuplicateAtom(ComplexQAError):
    """Only raised in strict mode; the default parser keeps the first atom."""


# numerics
class ShapeMismatch(ComplexQAError, ValueError):
    pass


class NumericError(ComplexQAError, ArithmeticError):
    pass


class GraphCycle(ComplexQAError):
    pass


class SolverFailure(ComplexQAError):
    pass


# dockq
class NumberingMismatch(ComplexQAError):
    pass


class DegenerateInterface(ComplexQAError):
    pass


class DegenerateGeometry(ComplexQAError):
    pass


# training
class DataEmpty(ComplexQAError):
    pass


class FormatError(ComplexQAError):
    """Unreadable graph cache, checkpoint, config or table file."""
