"""Exception hierarchy shared by all pipeline stages."""


class FoodEnergyError(Exception):
    """Base class for every error raised by this package."""


class ZeroAreaMask(FoodEnergyError, ValueError):
    pass


class ShapeMismatch(FoodEnergyError, ValueError):
    pass


class OverlappingSupport(FoodEnergyError, ValueError):
    pass


class NonPositiveScale(FoodEnergyError, ValueError):
    pass


class NonPositiveK(FoodEnergyError, ValueError):
    pass


class ParseError(FoodEnergyError, ValueError):
    """A file could not be parsed (manifest JSON, DMAP header, ...)."""


class ValidationError(FoodEnergyError, ValueError):
    """An occasion or item violates a data invariant.

    ``occasion_id`` and ``item_index`` point at the offending record when known.
    """

    def __init__(self, message, occasion_id=None, item_index=None):
        where = []
        if occasion_id is not None:
            where.append(f"occasion {occasion_id!r}")
        if item_index is not None:
            where.append(f"item {item_index}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.occasion_id = occasion_id
        self.item_index = item_index
        self.reason = message


class TooFewInstances(FoodEnergyError, ValueError):
    pass


class PlacementFailure(FoodEnergyError, RuntimeError):
    pass


class DivergenceError(FoodEnergyError, RuntimeError):
    pass


class EmptyTestSet(FoodEnergyError, ValueError):
    pass


class RunError(FoodEnergyError, RuntimeError):
    """Wraps a failure inside one run of a multi-run experiment."""

    def __init__(self, run_index, cause):
        super().__init__(f"run {run_index} failed: {cause}")
        self.run_index = run_index
        self.cause = cause
