"""Exception types shared across soc_lab."""


class SocLabError(Exception):
    """Base class for all soc_lab errors."""


class ValidationError(SocLabError):
    """Inputs, shapes, or analytic derivatives failed a consistency check."""


class SimulationError(SocLabError):
    """A simulated path left the finite range.

    Carries the step index and (when known) the path index at which the
    state first became non-finite.
    """

    def __init__(self, message, step_index=None, path_index=None):
        super().__init__(message)
        self.step_index = step_index
        self.path_index = path_index


class UnsupportedProblemError(SocLabError):
    """The operation requires structure (flags, dimensions) the problem lacks."""


class ConfigError(SocLabError):
    """A run configuration failed schema validation."""


class TrainingAborted(SocLabError):
    """Training stopped early on a non-finite or diverging loss.

    Attributes:
        iteration: index of the offending iteration.
        history: partial TrainHistory recorded up to the abort.
    """

    def __init__(self, message, iteration, history=None):
        super().__init__(message)
        self.iteration = iteration
        self.history = history
