"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Shapes of operands are incompatible."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf."""


class DataLoadError(ValueError):
    """A dataset directory is missing files or holds malformed content."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")
