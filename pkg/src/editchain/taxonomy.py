"""The closed attribute taxonomy and per-attribute change vocabularies.

The nine kinds and their change tokens are the shared vocabulary of the
whole pipeline: instruction templating, rule-based decomposition, the
banded mock faces, and dataset summaries all key off this module.
"""

from __future__ import annotations

from enum import Enum

from .errors import UnknownChangeToken


class AttributeKind(str, Enum):
    """Editable face attribute. Enumeration order is load-bearing: the
    banded mock faces assign one horizontal band per kind in this order,
    and summaries list rows in this order."""

    HAIR = "hair"
    SKIN = "skin"
    EYES = "eyes"
    AGE = "age"
    GENDER = "gender"
    ANIME = "anime"
    BEARD = "beard"
    GLASSES = "glasses"
    EXPRESSION = "expression"

    def __str__(self) -> str:  # serialization name, not the enum repr
        return self.value


# Change tokens registered per kind. These live in code rather than the
# editable asset files because the mock world's band palette and the
# embedding dimension are derived from them.
CHANGE_VOCABULARY: dict[AttributeKind, tuple[str, ...]] = {
    AttributeKind.HAIR: ("red", "black", "gray", "blonde", "brown"),
    AttributeKind.SKIN: ("white", "pink", "brown", "olive", "tan"),
    AttributeKind.EYES: ("blue", "black"),
    AttributeKind.AGE: ("younger", "older"),
    AttributeKind.GENDER: ("male", "female"),
    AttributeKind.ANIME: ("real", "anime"),
    AttributeKind.BEARD: ("add", "remove"),
    AttributeKind.GLASSES: ("add", "remove"),
    AttributeKind.EXPRESSION: ("happy", "angry", "sad", "fear", "disgust"),
}

ALL_KINDS: tuple[AttributeKind, ...] = tuple(AttributeKind)


def vocabulary_for(kind: AttributeKind) -> tuple[str, ...]:
    return CHANGE_VOCABULARY[kind]


def validate_change(kind: AttributeKind, change: str) -> str:
    if change not in CHANGE_VOCABULARY[kind]:
        raise UnknownChangeToken(
            f"{change!r} is not a registered change for {kind.value}; "
            f"expected one of {', '.join(CHANGE_VOCABULARY[kind])}"
        )
    return change


def registered_pairs() -> tuple[tuple[AttributeKind, str], ...]:
    """Every (kind, change token) pair in a fixed global order.

    The embedding dimension equals the length of this tuple; vector
    component i corresponds to registered_pairs()[i].
    """
    return tuple(
        (kind, token) for kind in ALL_KINDS for token in CHANGE_VOCABULARY[kind]
    )


EMBED_DIM = len(registered_pairs())
