class ErrorCode:
    """错误码定义"""
    TABLE_PARSE_FAILED = "TABLE_PARSE_FAILED"
    SCHEMA_MISMATCH = "SCHEMA_MISMATCH"
    MISSING_DATA = "MISSING_DATA"
    DIMENSION_MISMATCH = "DIMENSION_MISMATCH"
    UNKNOWN_SCENARIO = "UNKNOWN_SCENARIO"
    INVALID_CONFIG = "INVALID_CONFIG"
    CALIBRATION_FAILED = "CALIBRATION_FAILED"
    IMPUTATION_FAILED = "IMPUTATION_FAILED"
    USAGE_ERROR = "USAGE_ERROR"
    LEARNER_FAILED = "LEARNER_FAILED"


class SimulationException(Exception):
    """模拟工具异常类"""
    def __init__(self, code: str, message: str):
        self.code = code
        self.message = message
        super().__init__(message)

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"


class TableParseError(SimulationException):
    def __init__(self, message: str):
        super().__init__(ErrorCode.TABLE_PARSE_FAILED, message)


class SchemaError(SimulationException):
    def __init__(self, message: str):
        super().__init__(ErrorCode.SCHEMA_MISMATCH, message)


class MissingDataError(SimulationException):
    def __init__(self, message: str):
        super().__init__(ErrorCode.MISSING_DATA, message)


class DimensionError(SimulationException):
    def __init__(self, message: str):
        super().__init__(ErrorCode.DIMENSION_MISMATCH, message)


class UnknownScenarioError(SimulationException):
    def __init__(self, scenario_id: str):
        super().__init__(ErrorCode.UNKNOWN_SCENARIO, f"未知场景: {scenario_id}")
        self.scenario_id = scenario_id


class ConfigError(SimulationException):
    def __init__(self, message: str):
        super().__init__(ErrorCode.INVALID_CONFIG, message)


class ImputationError(SimulationException):
    def __init__(self, message: str):
        super().__init__(ErrorCode.IMPUTATION_FAILED, message)


class UsageError(SimulationException):
    def __init__(self, message: str):
        super().__init__(ErrorCode.USAGE_ERROR, message)


class CalibrationError(SimulationException):
    def __init__(self, message: str):
        super().__init__(ErrorCode.CALIBRATION_FAILED, message)


class LearnerError(SimulationException):
    def __init__(self, message: str):
        super().__init__(ErrorCode.LEARNER_FAILED, message)
