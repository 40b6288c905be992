class EngineError(Exception):
    pass


class InvalidInputError(EngineError, ValueError):
    pass


class InsufficientWindowError(InvalidInputError):
    pass


class ConfigurationError(EngineError, ValueError):
    pass


class ConfigValidationError(ConfigurationError):
    def __init__(self, message: str, keys: list[str]):
        super().__init__(message)
        self.keys = keys


class SchemaError(EngineError, ValueError):
    pass


class ParseError(EngineError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        location = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{location}")
        self.line = line


class VersionError(EngineError, ValueError):
    pass


class CalibrationFailedError(EngineError):
    pass


class VerifierError(EngineError, RuntimeError):
    pass
