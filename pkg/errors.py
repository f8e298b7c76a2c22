from typing import Optional


class HolmesError(Exception):
    """Base error. `code` is the machine-readable identifier."""

    code = "holmes_error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message}


class ValidationFailure(HolmesError):
    code = "validation_failure"


class ResourceFailure(HolmesError):
    code = "resource_failure"


# Binary/text artifact errors

class MagicMismatch(ValidationFailure):
    code = "magic_mismatch"

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TruncatedPayload(ValidationFailure):
    code = "truncated_payload"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NonFiniteValue(ValidationFailure):
    code = "non_finite_value"

    def __init__(self, message: str, offset: Optional[int] = None):
        suffix = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(f"{message}{suffix}")
        self.offset = offset


class SchemaViolation(ValidationFailure):
    code = "schema_violation"

    def __init__(self, message: str, line: Optional[int] = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")
        self.line = line


# Domain errors

class GlanceOutOfRange(ValidationFailure):
    code = "glance_out_of_range"


class EmptyGlanceSet(ValidationFailure):
    code = "empty_glance_set"


class LengthMismatch(ValidationFailure):
    code = "length_mismatch"


class DimMismatch(ValidationFailure):
    code = "dim_mismatch"


class DegenerateDataset(ValidationFailure):
    code = "degenerate_dataset"


class SingleClass(ValidationFailure):
    code = "single_class"


class SpecInvalid(ValidationFailure):
    code = "spec_invalid"


class TemplateRenderError(ValidationFailure):
    code = "template_render_error"


class ConfigParseError(ValidationFailure):
    code = "config_parse_error"


class GradientCheckFailed(ValidationFailure):
    code = "gradient_check_failed"


# I/O and client errors

class IoFailure(ResourceFailure):
    code = "io_failure"


class ClientTimeout(ResourceFailure):
    code = "client_timeout"


class ClientHttpError(ResourceFailure):
    code = "client_http_error"

    def __init__(self, status: int, message: str = ""):
        super().__init__(f"text-generation endpoint returned HTTP {status}{': ' + message if message else ''}")
        self.status = status


class EmptyCaption(ResourceFailure):
    code = "empty_caption"
