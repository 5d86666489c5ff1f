"""Exception types raised across the library."""


class RLError(Exception):
    """Base class for every error raised by nondiff_rl."""


class DimensionError(RLError, ValueError):
    pass


class StateError(RLError, RuntimeError):
    pass


class EpisodeStateError(StateError):
    pass


class ActionError(RLError, ValueError):
    pass


class ConfigError(RLError, ValueError):
    pass


class DomainError(RLError, ValueError):
    pass


class UnsupportedOperationError(RLError, TypeError):
    pass


class EmptyBufferError(RLError, IndexError):
    pass


class CheckpointError(RLError, ValueError):
    pass


class BudgetError(RLError, RuntimeError):
    pass


class UnsupportedEnvError(RLError, TypeError):
    pass


class TrainingDivergenceError(RLError, FloatingPointError):
    """A gradient or loss went non-finite; ``name`` identifies the culprit."""

    def __init__(self, name: str, message: str | None = None):
        self.name = name
        super().__init__(message or f"non-finite value in {name!r}")


class RolloutError(RLError, RuntimeError):
    """An environment failed while collecting data for actor ``actor``."""

    def __init__(self, actor: int, cause: BaseException):
        self.actor = actor
        super().__init__(f"actor {actor} failed: {cause!r}")
