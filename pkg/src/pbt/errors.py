"""Exception types raised across the package.

The CLI maps the three families onto exit codes: ``InputError`` -> 2,
``RoutingError`` / ``ConfigError`` -> 3, ``NumericError`` -> 4.
"""


class PBTError(Exception):
    pass


class InputError(PBTError, ValueError):
    pass


class ConfigError(PBTError, ValueError):
    pass


class RoutingError(PBTError, KeyError):
    def __str__(self):  # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class NumericError(PBTError, ArithmeticError):
    pass


# cycledata
class InvalidSeries(InputError):
    pass


class IncompleteCycle(InputError):
    pass


class InvalidCapacity(InputError):
    pass


class NotDegraded(InputError):
    pass


class TooFewCells(InputError):
    pass


class InvalidN(InputError):
    pass


class InvalidConfig(ConfigError):
    pass


class MalformedCellFile(InputError):
    def __init__(self, path, json_path, reason):
        super().__init__(f"{path}: {json_path}: {reason}")
        self.path = path
        self.json_path = json_path
        self.reason = reason


# aging
class NoValidToken(InputError):
    pass


class EmptyPrompt(InputError):
    pass


class EmbedderUnavailable(PBTError, ConnectionError):
    pass


class ProtocolError(InputError):
    pass


class DimensionMismatch(InputError):
    pass


# battmoe
class UnknownCategory(RoutingError):
    def __init__(self, kind, value):
        super().__init__(f"no expert registered for {kind}={value!r}")
        self.kind = kind
        self.value = value


# train
class EmptyBatch(InputError):
    pass


class InvalidLabel(InputError):
    pass


class NonFiniteGradient(NumericError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class NonFiniteLoss(NumericError):
    def __init__(self, step, result=None):
        super().__init__(f"non-finite training loss at step {step}")
        self.step = step
        self.result = result


class CheckpointError(InputError):
    pass
