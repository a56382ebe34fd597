"""Exception types raised across the package."""


class GeoSSLError(Exception):
    """Base class for all package errors."""

    code = "error"


class NotFoundError(GeoSSLError, FileNotFoundError):
    code = "not_found"


class EmptyClassError(GeoSSLError):
    code = "empty_class"

    def __init__(self, class_name: str):
        super().__init__(f"class directory {class_name!r} contains no decodable images")
        self.class_name = class_name


class DecodeError(GeoSSLError):
    code = "decode_error"

    def __init__(self, path, reason: str = ""):
        msg = f"cannot decode image {str(path)!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.path = path


class InvalidArgument(GeoSSLError, ValueError):
    code = "invalid_argument"


class StratificationError(GeoSSLError):
    code = "stratification_error"


class InvalidFraction(InvalidArgument):
    code = "invalid_fraction"


class DegenerateEmbedding(GeoSSLError, ValueError):
    code = "degenerate_embedding"

    def __init__(self, row: int):
        super().__init__(f"row {row} of the embedding matrix has zero norm")
        self.row = row


class InvalidTemperature(GeoSSLError, ValueError):
    code = "invalid_temperature"


class ConfigError(GeoSSLError):
    code = "config_error"


class CheckpointIncompatible(GeoSSLError):
    code = "checkpoint_incompatible"


class VersionError(GeoSSLError):
    code = "version_error"


class FormatError(GeoSSLError):
    code = "format_error"


class UndefinedMetric(GeoSSLError, ValueError):
    code = "undefined_metric"


class Unsupported(GeoSSLError):
    code = "unsupported"
