"""Exception types shared across the package."""


class EvoMoEError(Exception):
    pass


class ShapeError(EvoMoEError, ValueError):
    pass


class DimensionError(ShapeError):
    pass


class ConfigError(EvoMoEError, ValueError):
    pass


class ConsistencyError(EvoMoEError, RuntimeError):
    """Internal structure went out of sync (e.g. router width vs pool size)."""


class FrozenParameterError(EvoMoEError, RuntimeError):
    pass


class NonFiniteError(EvoMoEError, FloatingPointError):
    pass


class LookupFailure(EvoMoEError, KeyError):
    pass


class CheckpointError(EvoMoEError, RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass
