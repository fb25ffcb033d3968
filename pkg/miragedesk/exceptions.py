class MirageError(Exception):
    pass


class UserError(MirageError):
    """Errors caused by inputs or configuration. The command line exits with code 1 on these."""


class ShapeError(UserError, ValueError):
    pass


class LoadError(UserError, FileNotFoundError):
    pass


class ConfigError(UserError, KeyError):
    def __str__(self) -> str:
        return " ".join(map(str, self.args))


class InputError(UserError, ValueError):
    pass


class BoundsError(MirageError, IndexError):
    pass


class ContractError(MirageError, RuntimeError):
    pass


class InjectionError(ContractError):
    pass


class AdapterError(MirageError, RuntimeError):
    pass


class DegeneracyError(MirageError, ValueError):
    pass


class VisibilityError(MirageError, ValueError):
    pass


class NumericError(MirageError, ArithmeticError):
    pass
