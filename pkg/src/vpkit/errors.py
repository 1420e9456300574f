"""Exception hierarchy shared across vpkit."""


class VPKitError(Exception):
    """Base class for all vpkit errors."""


class InvalidParameterError(VPKitError, ValueError):
    pass


class BoundsError(VPKitError, ValueError):
    pass


class ConfigError(VPKitError):
    pass


class AnnotationParseError(VPKitError):
    pass


class TransportError(VPKitError):
    """Network-level failure; callers may retry."""


class ProtocolError(VPKitError):
    """The remote side answered with something we cannot interpret."""


class GatewayError(VPKitError):
    """Provider call failed after exhausting retries."""


class ProviderError(VPKitError):
    """Non-retryable provider rejection (4xx other than 429)."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class QuestionGenerationError(VPKitError):
    pass


class UndefinedScoreError(VPKitError, ValueError):
    pass


class DatasetBuildError(VPKitError):
    pass


class IncompatibleModelError(VPKitError):
    pass


class ModelParseError(VPKitError):
    pass


class NumericError(VPKitError, ArithmeticError):
    pass


class UndefinedMetricError(VPKitError, ValueError):
    pass


class JudgeArityError(VPKitError, ValueError):
    pass


class JudgeParseError(VPKitError, ValueError):
    pass


class StaleInputError(VPKitError):
    pass
