class BaseError(Exception):
    def __init__(self, error_msg="unknown", error_code=-1, payload=None) -> None:
        self.error_code = error_code
        self.msg = error_msg
        self.payload = payload
        super().__init__(error_msg)

    def __str__(self) -> str:
        if self.error_code == -1:
            return str(self.msg)
        return "{}. error code:{}".format(self.msg, self.error_code)


# 维度不匹配
class ShapeError(BaseError):
    pass


# 数据或配置不满足约束
class ValidationError(BaseError, ValueError):
    pass


class LabelError(ValidationError):
    pass


class DatasetError(ValidationError):
    pass


class ConfigError(ValidationError):
    def __init__(self, error_msg="invalid config", key=None, payload=None) -> None:
        self.key = key
        if key is not None:
            error_msg = "{}: {}".format(key, error_msg)
        super().__init__(error_msg, payload=payload)


# 出现 NaN / Inf
class NumericalError(BaseError):
    pass


class TrainingError(BaseError):
    pass


# 冻结参数被修改
class FreezeViolation(TrainingError):
    pass


# 命令行用法错误
class UsageError(BaseError):
    pass
