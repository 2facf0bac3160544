from __future__ import annotations

import re
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Optional, Union

_FRACTION_RE = re.compile(r"^\s*(-?\d+)\s*(?:/\s*(\d+))?\s*$")
_WHITESPACE_RE = re.compile(r"\s+")

Number = Union[Fraction, int, Decimal]


def collapse_label(text: Optional[str]) -> str:
    """Lowercase, trim and collapse internal whitespace.

    Example:
        >>> collapse_label("  ABB  E-mobility ")
        'abb e-mobility'
    """

    if text is None:
        return ""
    return _WHITESPACE_RE.sub(" ", text.strip()).lower()


def percent_decimal(value: Number, places: int = 1) -> Decimal:
    """Return `value` (a share in [0, 1]) as a percent rounded half-up.

    Example:
        >>> percent_decimal(Fraction(142, 519))
        Decimal('27.4')
    """

    exact = Fraction(value) * 100
    quantum = Decimal(1).scaleb(-places)
    numerator = Decimal(exact.numerator)
    denominator = Decimal(exact.denominator)
    return (numerator / denominator).quantize(quantum, rounding=ROUND_HALF_UP)


def format_percent(value: Number, places: int = 1) -> str:
    return str(percent_decimal(value=value, places=places))


def fraction_to_text(value: Fraction) -> str:
    """Serialize an exact share as `num/den` for JSON artifacts."""

    return f"{value.numerator}/{value.denominator}"


def fraction_from_text(text: str) -> Fraction:
    match = _FRACTION_RE.match(str(text))
    if not match:
        raise ValueError(f"not a fraction: {text!r}")
    numerator = int(match.group(1))
    denominator = int(match.group(2)) if match.group(2) else 1
    return Fraction(numerator, denominator)


def format_mac(mac: bytes) -> str:
    return ":".join(f"{octet:02x}" for octet in mac)
