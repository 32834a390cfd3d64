class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class FormatError(ValueError):
    """A binary or text file does not match the expected layout."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass
