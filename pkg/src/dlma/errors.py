"""Exception types shared across the engine."""


class DlmaError(Exception):
    """Base class for engine errors."""


class ConfigError(DlmaError):
    """Invalid or unknown configuration."""


class GatewayError(DlmaError):
    """Provider call failed."""


class TransportError(GatewayError):
    """Live HTTP transport failed after all retries."""


class TranscriptExhausted(GatewayError):
    """A scripted tag has no entries left; never recycled silently."""


class EmptyResponse(GatewayError):
    """Provider returned empty text."""


class ParseError(DlmaError):
    """Model output did not match the expected wire contract."""


class MeetingFailure(DlmaError):
    """A leader-loop meeting could not run; degrades to 'unchanged'."""


class OutOfRangeScore(DlmaError):
    """A rubric score fell outside its [min, max] bounds."""


class JournalCorrupt(DlmaError):
    """Sequence gap, checksum failure, or replay divergence."""


class SandboxViolation(DlmaError):
    """A tool call tried to touch paths outside its working directory."""


class CompileUnavailable(DlmaError):
    """No compiler binary and the dry-run validator is disabled."""
