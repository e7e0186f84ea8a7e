class GialabError(Exception):
    pass


class ShapeError(GialabError, ValueError):
    pass


class DomainError(GialabError, ValueError):
    pass


class NumericError(GialabError, ArithmeticError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class PartitionError(GialabError, ValueError):
    pass


class SelectionError(GialabError, ValueError):
    pass


class ProtocolError(GialabError, RuntimeError):
    pass


class AttackError(GialabError, ValueError):
    pass


class ConfigError(GialabError, ValueError):
    pass
