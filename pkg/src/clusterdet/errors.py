"""Exception types shared across the package."""


class InputError(ValueError):
    """Invalid argument or malformed input."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or degenerate value."""


class FormatError(InputError):
    """A file on disk could not be parsed."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path} (byte {offset}): {message}")
