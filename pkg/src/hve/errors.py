"""Exception hierarchy shared by every hve module."""


class HVEError(Exception):
    """Base class for all errors raised by hve."""


class ShapeError(HVEError, ValueError):
    """Operand dimensions do not agree."""


class DomainError(HVEError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(HVEError, RuntimeError):
    """A caller broke an API precondition (non-scalar backward root, missing gradient, ...)."""


class FormatError(HVEError, ValueError):
    """A file on disk does not match its declared format.

    ``position`` is the byte offset (binary formats) or 1-based line number
    (text formats) where the problem was detected, when known.
    """

    def __init__(self, message, path=None, position=None):
        self.path = path
        self.position = position
        where = []
        if path is not None:
            where.append(str(path))
        if position is not None:
            where.append(f"at {position}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class IntegrityError(HVEError, ValueError):
    """A manifest references rows that do not exist in its feature banks."""

    def __init__(self, message, instance_id=None):
        self.instance_id = instance_id
        super().__init__(message)


class IncompatibleCheckpointError(HVEError, ValueError):
    """A checkpoint does not fit the model it is being loaded into."""

    def __init__(self, message, parameter=None):
        self.parameter = parameter
        super().__init__(message)


class SamplingError(HVEError, ValueError):
    """Not enough eligible relations/instances to draw an episode."""


class GenerationError(HVEError, RuntimeError):
    """The synthetic-data generator could not satisfy its constraints."""


class ConfigError(HVEError, ValueError):
    """A run config or synth spec failed validation.

    ``problems`` lists every offending key path with a short reason.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NumericError(HVEError, FloatingPointError):
    """Training produced a non-finite value."""

    def __init__(self, message, episode=None):
        self.episode = episode
        super().__init__(message)
