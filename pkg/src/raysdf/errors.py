"""Exception types shared across the package."""


class InputDomainError(ValueError):
    """An argument violates a documented precondition."""


class DegenerateRayError(InputDomainError):
    """A raw ray's direction part is too small to normalize."""


class DegenerateBundleError(ValueError):
    """A ray bundle does not constrain a camera (e.g. all rays parallel)."""


class EmptySurfaceError(ValueError):
    """Marching cubes found no sign change in the sampled field."""


class DivergenceError(RuntimeError):
    """An optimization produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ObjParseError(ValueError):
    """Malformed OBJ file; carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")
