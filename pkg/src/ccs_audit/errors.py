from __future__ import annotations

from typing import Optional

EXIT_INPUT_ERROR = 2
EXIT_FORMAT_MISMATCH = 3
EXIT_RUNTIME_FAILURE = 4


class AuditError(RuntimeError):
    """Control-flow exception carrying CLI-style exit metadata."""

    exit_code = EXIT_RUNTIME_FAILURE

    def __init__(self, message: str, exit_code: Optional[int] = None) -> None:
        super().__init__(message)
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code


class InputError(AuditError):
    exit_code = EXIT_INPUT_ERROR


class SchemaError(InputError):
    """Input schema mismatch; `field` names the missing column or key."""

    def __init__(self, message: str, field: str = "") -> None:
        super().__init__(message)
        self.field = field


class ProfileError(InputError):
    """Simulator profile violates an invariant."""

    def __init__(self, profile: str, field: str, reason: str) -> None:
        super().__init__(f"profile {profile!r}: {field}: {reason}")
        self.profile = profile
        self.field = field


class UnknownClusterError(InputError):
    def __init__(self, cpo: str, manufacturer: str) -> None:
        super().__init__(f"report references unknown cluster ({cpo}, {manufacturer})")
        self.cpo = cpo
        self.manufacturer = manufacturer


class FormatVersionError(AuditError):
    exit_code = EXIT_FORMAT_MISMATCH


class ProbeRuntimeError(AuditError):
    exit_code = EXIT_RUNTIME_FAILURE


class TerminationGuardError(AuditError):
    """Raised when anything tries to move past negotiation (e.g. CP state C)."""

    exit_code = EXIT_RUNTIME_FAILURE


class DecodeError(ValueError):
    """Structured decode failure raised by every wire codec.

    Args:
        layer: Codec layer (`mme`, `v2gtp`, `sdp`, `exi`).
        reason: Short machine token such as `truncated` or `bad_ethertype`.
        offset: Byte offset (bit offset for `exi`) where decoding stopped.
        detail: Optional human-readable context.

    Example:
        >>> str(DecodeError(layer="mme", reason="truncated", offset=0))
        'mme decode error at offset 0: truncated'
    """

    def __init__(self, layer: str, reason: str, offset: int, detail: str = "") -> None:
        text = f"{layer} decode error at offset {offset}: {reason}"
        if detail:
            text = f"{text} ({detail})"
        super().__init__(text)
        self.layer = layer
        self.reason = reason
        self.offset = offset
        self.detail = detail


class FrameSizeError(ValueError):
    pass


class HandshakeValidationError(ValueError):
    pass
