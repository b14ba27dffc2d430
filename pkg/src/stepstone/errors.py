"""Exception hierarchy shared by every stepstone module."""


class StepStoneError(Exception):
    """Base class for all simulator errors."""


class MappingError(StepStoneError):
    pass


class MappingParseError(MappingError):
    pass


class NonInvertibleMapping(MappingError):
    pass


class UnknownField(MappingError):
    pass


class AddressOutOfRange(StepStoneError):
    pass


class GeometryError(StepStoneError):
    pass


class MatrixSmallerThanBlock(GeometryError):
    pass


class AddressOutsideMatrix(StepStoneError):
    pass


class UnalignedAddress(StepStoneError):
    pass


class RegionTooSmall(StepStoneError):
    pass


class ShapeMismatch(StepStoneError):
    pass


class PlanGeometryMismatch(StepStoneError):
    pass


class Infeasible(StepStoneError):
    pass


class MissingPartial(StepStoneError):
    pass


class UnreconciledTrace(StepStoneError):
    pass


class ConfigError(StepStoneError):
    pass
