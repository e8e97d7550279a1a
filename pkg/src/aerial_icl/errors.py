class AerialICLError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(AerialICLError):
    """Invalid configuration. ``problems`` lists every failed check."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(AerialICLError):
    """Unreadable, inconsistent or missing input data."""


class IntegrityError(AerialICLError):
    """A checkpoint or tile file failed its integrity check."""


class TrainingDivergedError(AerialICLError):
    """A non-finite loss was produced during optimization."""
