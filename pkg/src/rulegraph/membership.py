"""Ordinal membership labels used by rule antecedents, thresholds and fusion tie-breaks.

Membership is expressed as one of six discrete term labels with a total order

    H > SH > M > ML > Lr > L

rather than a numeric degree. Labels arrive as free-form text from model
output, so parsing accepts short and long aliases case-insensitively and
fails loudly on anything else.
"""

from __future__ import annotations

import enum
import functools


class UnrecognizedLabel(ValueError):
    """Raised when a token matches no known membership alias."""


@functools.total_ordering
class MembershipLabel(enum.Enum):
    """Six-level ordinal membership degree; higher value means stronger membership."""

    L = 0
    LR = 1
    ML = 2
    M = 3
    SH = 4
    H = 5

    @property
    def token(self) -> str:
        """Canonical short token, the serialized form in traces and datasets."""
        return _TOKENS[self]

    @property
    def long_form(self) -> str:
        return _LONG_FORMS[self]

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, MembershipLabel):
            return NotImplemented
        return self.value < other.value

    def __str__(self) -> str:
        return self.token


_TOKENS = {
    MembershipLabel.H: "H",
    MembershipLabel.SH: "SH",
    MembershipLabel.M: "M",
    MembershipLabel.ML: "ML",
    MembershipLabel.LR: "Lr",
    MembershipLabel.L: "L",
}

_LONG_FORMS = {
    MembershipLabel.H: "High",
    MembershipLabel.SH: "Sub-High",
    MembershipLabel.M: "Medium",
    MembershipLabel.ML: "Mid-Low",
    MembershipLabel.LR: "Lower",
    MembershipLabel.L: "Low",
}

# Short and long forms only; anything else is an error rather than a guess.
_ALIASES = {
    **{token.casefold(): label for label, token in _TOKENS.items()},
    **{long.casefold(): label for label, long in _LONG_FORMS.items()},
}


def parse_label(text: str) -> MembershipLabel:
    """Parse a free-form token into a label.

    Accepts the canonical short tokens (H, SH, M, ML, Lr, L) and their long
    forms (High, Sub-High, Medium, Mid-Low, Lower, Low), case-insensitively,
    with surrounding whitespace ignored.

    Raises:
        UnrecognizedLabel: no alias matched; the caller decides whether to
            retry the upstream model call.
    """
    if not isinstance(text, str) or not text.strip():
        raise UnrecognizedLabel(f"empty membership token: {text!r}")
    key = text.strip().casefold()
    try:
        return _ALIASES[key]
    except KeyError:
        raise UnrecognizedLabel(f"unknown membership token: {text!r}") from None


def render_label(label: MembershipLabel) -> str:
    """Canonical short token for a label; inverse of parse_label."""
    return label.token


def below(label: MembershipLabel, threshold: MembershipLabel) -> bool:
    """True iff label is strictly lower than threshold (equal is not below)."""
    return label < threshold


ALL_LABELS = tuple(sorted(MembershipLabel, key=lambda l: l.value, reverse=True))
