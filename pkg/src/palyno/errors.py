"""Exception hierarchy.

Validation problems (bad files, bad parameters) derive from
:class:`ValidationError` and map to CLI exit code 2; numerical failures
derive from :class:`NumericalError` and map to exit code 3.
"""


class PalynoError(Exception):
    exit_code = 1


class ValidationError(PalynoError, ValueError):
    exit_code = 2


class NumericalError(PalynoError, ArithmeticError):
    exit_code = 3


class ParseError(ValidationError):
    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class DuplicateId(ValidationError):
    def __init__(self, id_):
        self.id = id_
        super().__init__(f"duplicate id {id_!r}")


class BadValue(ValidationError):
    def __init__(self, message, row=None, col=None):
        self.row = row
        self.col = col
        where = "" if row is None else f" at row {row}, col {col}"
        super().__init__(f"{message}{where}")


class OutOfBounds(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class InvalidK(ValidationError):
    pass


class InvalidDistances(ValidationError):
    pass


class EmptyIntersection(ValidationError):
    pass


class NeedsProjection(ValidationError):
    pass


class DisconnectedInput(NumericalError):
    pass


class DisconnectedGraph(NumericalError):
    def __init__(self, component_sizes):
        self.component_sizes = list(component_sizes)
        super().__init__(
            f"neighbor graph has {len(self.component_sizes)} components "
            f"(sizes {self.component_sizes}); raise k_nn or use the "
            "largest-component policy"
        )


class SingularFit(NumericalError):
    pass


class Diverged(NumericalError):
    def __init__(self, iteration):
        self.iteration = iteration
        super().__init__(f"non-finite geodesic iterate at iteration {iteration}")


class DegenerateMarginals(NumericalError):
    pass


class NonMonotoneObjective(NumericalError):
    pass
