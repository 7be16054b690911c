#!/usr/bin/env python3
"""Exception hierarchy for sirlab"""

from typing import Optional


class SirlabError(Exception):
    """Base exception for sirlab errors"""

    pass


class ParameterError(SirlabError):
    """Raised when an argument is outside its valid range"""

    pass


class DomainError(SirlabError):
    """Raised when a function is evaluated outside its domain"""

    pass


class ModelError(SirlabError):
    """Raised when a score model is malformed or cannot serve a condition"""

    pass


class ConfigError(ParameterError):
    """Raised when a run configuration or config file is invalid"""

    pass


class SceneFormatError(SirlabError):
    """Raised when a serialized scene or mesh file cannot be parsed"""

    pass


class DivergenceError(SirlabError):
    """Raised when an optimization loss becomes non-finite"""

    def __init__(
        self,
        loss: float,
        iteration: Optional[int] = None,
        step: Optional[int] = None,
        phase: str = "sir",
    ):
        self.loss = loss
        self.iteration = iteration
        self.step = step
        self.phase = phase
        where = f"{phase}"
        if iteration is not None:
            where += f" iteration {iteration}"
        if step is not None:
            where += f" step {step}"
        super().__init__(f"Non-finite loss {loss!r} at {where}")

    def __reduce__(self):
        return (type(self), (self.loss, self.iteration, self.step, self.phase))
