class TascforgeError(Exception):
    """Base for every failure the library reports. `exit_code` is what the CLI returns."""

    exit_code: int = 3


class ConfigError(TascforgeError, ValueError):
    exit_code = 2


class CapacityError(TascforgeError):
    exit_code = 4


# tensor-core


class ShapeMismatch(TascforgeError, ValueError):
    pass


class NotPositiveDefinite(TascforgeError, ValueError):
    pass


class SingularMatrix(TascforgeError, ValueError):
    pass


# search space / surrogate / driver


class DimensionMismatch(TascforgeError, ValueError):
    pass


class InvalidConfig(TascforgeError, ValueError):
    pass


class SpaceTooLarge(CapacityError):
    pass


class NotEnoughObservations(TascforgeError, ValueError):
    pass


class EmptyCandidatePool(TascforgeError):
    pass


# networks


class ArchitectureInfeasible(TascforgeError, ValueError):
    pass


class NonFiniteLoss(TascforgeError, ArithmeticError):
    pass


class CheckpointError(TascforgeError):
    pass


# pruning


class ZeroNormVector(TascforgeError, ValueError):
    pass


class InconsistentShapes(TascforgeError, ValueError):
    pass


class LayerIneligible(TascforgeError, ValueError):
    pass


class InsufficientDistinctFilters(TascforgeError, ValueError):
    pass


class GroupMismatch(TascforgeError, ValueError):
    pass


class WouldEmptyLayer(TascforgeError, ValueError):
    pass


class NoEligibleLayers(TascforgeError):
    pass


# data


class BadMagic(TascforgeError, ValueError):
    pass


class CountMismatch(TascforgeError, ValueError):
    pass


class TruncatedFile(TascforgeError, ValueError):
    pass


class ClassTooSmall(TascforgeError, ValueError):
    pass


class EmptyClass(TascforgeError, ValueError):
    pass
