class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ScheduleError(RuntimeError):
    """A job graph cannot be executed (cycle, dangling dependency)."""


class CorruptionError(ValueError):
    """A compressed payload does not decode against the given shapes."""


class ConfigError(ValueError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
