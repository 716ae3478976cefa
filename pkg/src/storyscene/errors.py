"""Exception types shared across the package."""

from __future__ import annotations


class StorySceneError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(StorySceneError, ValueError):
    """Operand shapes or resolutions are incompatible."""


class ContractError(StorySceneError, ValueError):
    """A structural contract was violated (e.g. denoiser batch size)."""


class ConfigError(StorySceneError, RuntimeError):
    """Invalid or incomplete configuration; raised before any work starts."""


class TransportError(StorySceneError, RuntimeError):
    """A client call failed after exhausting retries.

    ``body`` carries the raw response payload when one was received.
    """

    def __init__(self, message: str, body: str | None = None):
        super().__init__(message)
        self.body = body


class PlanningError(StorySceneError, RuntimeError):
    """A scene-planning stage failed; ``stage`` names the failing step."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class PlanParseError(PlanningError):
    """A model reply could not be parsed; keeps the raw transcript."""

    def __init__(self, message: str, transcript: str, stage: str | None = None):
        super().__init__(message, stage=stage)
        self.transcript = transcript


class JudgingError(PlanningError):
    """The plan-judging reply stayed unparseable after a re-prompt."""


class GenerationError(StorySceneError, RuntimeError):
    """Denoising failed; records the timestep and, if paired, the pair."""

    def __init__(self, message: str, timestep: int | None = None,
                 pair: tuple[int, int] | None = None):
        super().__init__(message)
        self.timestep = timestep
        self.pair = pair
