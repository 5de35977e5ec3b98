class PLAdaptError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(PLAdaptError, ValueError):
    pass


class ContractError(PLAdaptError):
    pass


class NonFiniteError(ContractError, ArithmeticError):
    pass


class ConfigError(PLAdaptError):
    pass


class PnmParseError(PLAdaptError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f'{message} (at byte offset {offset})')
        self.offset = offset
