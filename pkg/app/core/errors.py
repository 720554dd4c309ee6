"""Error hierarchy shared by every layer.

Each error carries the process exit code the command line reports for it:
2 for invalid configuration or missing inputs, 1 for failures at run time.
"""


class RefineError(Exception):
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigurationError(RefineError):
    exit_code = 2


class MissingArtifactError(RefineError):
    exit_code = 2

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


class ShapeError(RefineError):
    exit_code = 2


class ImageFormatError(RefineError):
    exit_code = 2


class ImageTooSmallError(ShapeError):
    pass


class NonFiniteError(RefineError):
    pass


class GraphError(RefineError):
    pass


class CalibrationError(RefineError):
    pass


class DivergenceError(RefineError):

    def __init__(self, message: str, step: int, recent_losses: list[float]):
        super().__init__(f"{message} (step {step}, recent losses {recent_losses})")
        self.step = step
        self.recent_losses = recent_losses
