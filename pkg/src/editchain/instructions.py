"""Instruction representations, templating, and keyword detection.

Templates turn an (attribute, change) pair into a single-attribute
sentence; compose_multi joins several such clauses into one compound
instruction while keeping the ground-truth edit list attached. The
keyword lexicon runs the other direction: from free text back to
attribute kinds. Templates and lexicon ship as editable JSON assets and
the two are kept mutually compatible by tests (every rendered sentence
must detect as exactly its own kind).
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .errors import (
    DuplicateAttribute,
    EmptyEditList,
    NoTemplateForKind,
)
from .taxonomy import AttributeKind, validate_change, vocabulary_for

TemplateSet = dict[AttributeKind, tuple[str, ...]]
Lexicon = dict[AttributeKind, tuple[str, ...]]

# Surface forms for change tokens inside templates; identity unless listed.
SURFACE_FORMS: dict[tuple[AttributeKind, str], str] = {}

_SUPPORTED_LANGUAGES = ("en",)


def _read_asset(name: str) -> str:
    return resources.files("editchain.assets").joinpath(name).read_text("utf-8")


def _parse_kind_table(raw: str, what: str) -> dict[AttributeKind, tuple[str, ...]]:
    data = json.loads(raw)
    table: dict[AttributeKind, tuple[str, ...]] = {}
    for key, values in data.items():
        if key.startswith("_"):
            continue  # comment keys
        kind = AttributeKind(key)
        if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
            raise ValueError(f"{what}: entry for {key!r} must be a list of strings")
        table[kind] = tuple(values)
    return table


def load_template_set(path: str | Path | None = None) -> TemplateSet:
    raw = Path(path).read_text("utf-8") if path else _read_asset("templates.json")
    table = _parse_kind_table(raw, "template set")
    for kind, templates in table.items():
        for t in templates:
            if "{change}" not in t:
                raise ValueError(f"template for {kind.value} lacks {{change}}: {t!r}")
    return table


def load_lexicon(path: str | Path | None = None) -> Lexicon:
    raw = Path(path).read_text("utf-8") if path else _read_asset("lexicon.json")
    return _parse_kind_table(raw, "lexicon")


@lru_cache(maxsize=1)
def default_templates() -> TemplateSet:
    return load_template_set()


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    return load_lexicon()


# --- detection --------------------------------------------------------------

def _keyword_pattern(words: tuple[str, ...]) -> re.Pattern[str]:
    alternatives = "|".join(re.escape(w) for w in words)
    return re.compile(rf"\b(?:{alternatives})\b", re.IGNORECASE)


@lru_cache(maxsize=8)
def _compiled_lexicon(
    items: tuple[tuple[AttributeKind, tuple[str, ...]], ...]
) -> tuple[tuple[AttributeKind, re.Pattern[str]], ...]:
    return tuple((kind, _keyword_pattern(words)) for kind, words in items)


def detect_attributes(text: str, lexicon: Lexicon | None = None) -> list[AttributeKind]:
    """Attribute kinds whose keywords occur in `text`, ordered by first
    occurrence, deduplicated. Empty list when nothing matches."""
    lexicon = lexicon or default_lexicon()
    hits: list[tuple[int, AttributeKind]] = []
    for kind, pattern in _compiled_lexicon(tuple(lexicon.items())):
        m = pattern.search(text)
        if m:
            hits.append((m.start(), kind))
    hits.sort(key=lambda h: h[0])
    return [kind for _, kind in hits]


def find_change_token(text: str, kind: AttributeKind) -> str | None:
    """Earliest registered change token of `kind` occurring in `text`."""
    best: tuple[int, str] | None = None
    for token in vocabulary_for(kind):
        m = re.search(rf"\b{re.escape(token)}\b", text, re.IGNORECASE)
        if m and (best is None or m.start() < best[0]):
            best = (m.start(), token)
    return best[1] if best else None


_CLAUSE_SPLIT = re.compile(r",|;|\band\b|\bthen\b", re.IGNORECASE)


def split_clauses(text: str) -> list[str]:
    """Split at top-level conjunctions (commas, semicolons, 'and', 'then'),
    dropping empty fragments. Shared by the rule-based decomposer and the
    clause-scoped state detection."""
    return [frag.strip() for frag in _CLAUSE_SPLIT.split(text) if frag.strip()]


def detect_state_pairs(
    text: str, lexicon: Lexicon | None = None
) -> list[tuple[AttributeKind, str]]:
    """Registered (kind, change token) pairs mentioned by `text`.

    A pair counts as mentioned when one clause contains both a keyword of
    the kind and the token itself. The clause scoping is what keeps
    "black hair, blue eyes" from also reading as black eyes.
    """
    lexicon = lexicon or default_lexicon()
    found: list[tuple[AttributeKind, str]] = []
    seen: set[tuple[AttributeKind, str]] = set()
    for clause in split_clauses(text):
        for kind in detect_attributes(clause, lexicon):
            token = find_change_token(clause, kind)
            if token and (kind, token) not in seen:
                seen.add((kind, token))
                found.append((kind, token))
    return found


# --- instruction types ------------------------------------------------------

@dataclass(frozen=True)
class AttributeEdit:
    """One requested change: an attribute kind plus a registered token."""

    kind: AttributeKind
    change: str

    def __post_init__(self) -> None:
        validate_change(self.kind, self.change)

    def __str__(self) -> str:
        return f"{self.kind.value}->{self.change}"


@dataclass(frozen=True)
class SingleAttributeInstruction:
    text: str
    edit: AttributeEdit | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("instruction text must be non-empty")
        if self.edit is not None and self.edit.kind not in detect_attributes(self.text):
            raise ValueError(
                f"text {self.text!r} does not mention its own attribute "
                f"{self.edit.kind.value}"
            )


def _require_distinct_kinds(kinds: list[AttributeKind]) -> None:
    dupes = {k for k in kinds if kinds.count(k) > 1}
    if dupes:
        names = ", ".join(sorted(k.value for k in dupes))
        raise DuplicateAttribute(f"repeated attribute kind(s): {names}")


@dataclass(frozen=True)
class MultiAttributeInstruction:
    """The compound instruction: one sentence, N ground-truth edits."""

    text: str
    edits: tuple[AttributeEdit, ...]

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("instruction text must be non-empty")
        if not self.edits:
            raise EmptyEditList("a compound instruction needs at least one edit")
        object.__setattr__(self, "edits", tuple(self.edits))
        _require_distinct_kinds([e.kind for e in self.edits])

    @property
    def attribute_count(self) -> int:
        return len(self.edits)


@dataclass(frozen=True)
class InstructionChain:
    """Ordered single-attribute steps plus where they came from.

    Steps may be empty only for the degenerate zero-step execution case;
    decomposers never emit empty chains.
    """

    steps: tuple[SingleAttributeInstruction, ...]
    provenance: str  # one of {llm, rule_based, manual}
    raw_response: str | None = field(default=None)

    def __post_init__(self) -> None:
        if self.provenance not in ("llm", "rule_based", "manual"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "steps", tuple(self.steps))
        known = [s.edit.kind for s in self.steps if s.edit is not None]
        _require_distinct_kinds(known)

    def __len__(self) -> int:
        return len(self.steps)


# --- rendering --------------------------------------------------------------

def _seeded(*parts: object) -> random.Random:
    # string seeds hash deterministically across processes, tuples do not
    return random.Random(":".join(str(p) for p in parts))


def render_instruction(
    edit: AttributeEdit,
    template_set: TemplateSet | None = None,
    language_tag: str = "en",
    rng_seed: int | str = 0,
) -> SingleAttributeInstruction:
    """Render one edit as a sentence. Deterministic for a fixed seed."""
    if language_tag not in _SUPPORTED_LANGUAGES:
        raise NoTemplateForKind(f"no template pack for language {language_tag!r}")
    if template_set is None:
        template_set = default_templates()
    templates = template_set.get(edit.kind)
    if not templates:
        raise NoTemplateForKind(f"no templates registered for {edit.kind.value}")
    template = _seeded("tpl", rng_seed, edit.kind.value, edit.change).choice(templates)
    surface = SURFACE_FORMS.get((edit.kind, edit.change), edit.change)
    return SingleAttributeInstruction(text=template.format(change=surface), edit=edit)


def compose_multi(
    edits: list[AttributeEdit] | tuple[AttributeEdit, ...],
    phrasing_seed: int | str = 0,
    template_set: TemplateSet | None = None,
) -> MultiAttributeInstruction:
    """Join per-edit clauses into one sentence: "A", "A and B", or
    "A, B, and C". Edit order is preserved verbatim."""
    edits = tuple(edits)
    if not edits:
        raise EmptyEditList("compose_multi needs at least one edit")
    _require_distinct_kinds([e.kind for e in edits])
    clauses = [
        render_instruction(
            e, template_set=template_set, rng_seed=f"{phrasing_seed}:{i}"
        ).text
        for i, e in enumerate(edits)
    ]
    if len(clauses) == 1:
        text = clauses[0]
    elif len(clauses) == 2:
        text = f"{clauses[0]} and {clauses[1]}"
    else:
        text = ", ".join(clauses[:-1]) + f", and {clauses[-1]}"
    return MultiAttributeInstruction(text=text, edits=edits)
