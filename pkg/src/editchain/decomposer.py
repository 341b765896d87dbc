"""Compound-instruction decomposition.

Two paths produce an InstructionChain from a MultiAttributeInstruction:

* decompose_llm builds a one-shot prompt (task description, one worked
  demonstration with an attribute-count hint, then the query), sends it
  to a text-completion backend, and parses the numbered response. Parse
  failures get fresh retries; the expected step count is enforced when
  ground truth is known.
* decompose_rule_based splits the text at top-level conjunctions. It is
  fully offline and doubles as the test oracle for the LLM path.

The canonical serialization (render_chain) is "Output:" followed by
"k. <instruction>" lines; the parser deliberately accepts much sloppier
formats than the emitter produces.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol

from .errors import (
    CountMismatch,
    DecompositionFailed,
    DuplicateAttribute,
    MalformedOutput,
    UnsplittableInstruction,
)
from .instructions import (
    AttributeEdit,
    InstructionChain,
    MultiAttributeInstruction,
    SingleAttributeInstruction,
    detect_attributes,
    find_change_token,
    split_clauses,
)
from .taxonomy import AttributeKind


class TextCompleter(Protocol):
    def complete(
        self, prompt: str, temperature: float = 0.0, max_tokens: int = 256
    ) -> str: ...


# --- prompt template --------------------------------------------------------

@dataclass(frozen=True)
class Demonstration:
    demo_input: str
    attribute_hint: str
    demo_output: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.demo_output:
            raise ValueError("demonstration needs at least one output line")


@dataclass(frozen=True)
class PromptTemplate:
    task_description: str
    demonstration: Demonstration
    query_prefix: str


def hint_for_kinds(kinds: list[AttributeKind] | tuple[AttributeKind, ...]) -> str:
    names = ", ".join(k.value for k in kinds)
    return f"The instruction involves {len(kinds)} attribute changes: {names}"


def load_prompt_template(path: str | Path | None = None) -> PromptTemplate:
    if path:
        raw = Path(path).read_text("utf-8")
    else:
        raw = resources.files("editchain.assets").joinpath(
            "prompt_template.json"
        ).read_text("utf-8")
    data = json.loads(raw)
    demo = data["demonstration"]
    if "attribute_hint" in demo:
        hint = demo["attribute_hint"]
    else:
        hint = hint_for_kinds([AttributeKind(k) for k in demo["demo_kinds"]])
    return PromptTemplate(
        task_description=data.get("task_description", ""),
        demonstration=Demonstration(
            demo_input=demo["demo_input"],
            attribute_hint=hint,
            demo_output=tuple(demo["demo_output"]),
        ),
        query_prefix=data.get("query_prefix", ""),
    )


def build_prompt(instr: MultiAttributeInstruction, template: PromptTemplate) -> str:
    """Concatenate task description, demonstration block, and query block.

    Plain concatenation, no truncation: the result always contains
    exactly two "Input:" and two "Output:" markers.
    """
    demo = template.demonstration
    numbered = "\n".join(f"{i}. {t}" for i, t in enumerate(demo.demo_output, 1))
    demo_block = (
        f"Input: {demo.demo_input}\n{demo.attribute_hint}\nOutput:\n{numbered}"
    )
    query_lines = [template.query_prefix] if template.query_prefix else []
    query_lines.append(f"Input: {instr.text}\nOutput:")
    query_block = "\n".join(query_lines)
    blocks = [template.task_description] if template.task_description else []
    blocks += [demo_block, query_block]
    return "\n\n".join(blocks)


# --- response parsing -------------------------------------------------------

_OUTPUT_MARKER = re.compile(r"\boutput\b\s*:?", re.IGNORECASE)
_NUMBERED_ITEM = re.compile(r"^\s*(?:step\s+)?(\d+)\s*[.):]\s*(.+?)\s*$", re.IGNORECASE)
_BULLET_ITEM = re.compile(r"^\s*[-*•]\s+(.+?)\s*$")


def _strip_quotes(text: str) -> str:
    text = text.strip()
    while len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    return text


def _extract_items(raw: str) -> list[str]:
    markers = list(_OUTPUT_MARKER.finditer(raw))
    segment = raw[markers[-1].end():] if markers else raw
    items: list[str] = []
    for line in segment.splitlines():
        m = _NUMBERED_ITEM.match(line)
        text = m.group(2) if m else None
        if text is None:
            b = _BULLET_ITEM.match(line)
            text = b.group(1) if b else None
        if text is not None:
            text = _strip_quotes(text)
            if text:
                items.append(text)
    return items


def step_from_text(text: str) -> SingleAttributeInstruction:
    """Build a step, attaching an edit when text pins down exactly one
    kind and one of its registered change tokens."""
    kinds = detect_attributes(text)
    edit = None
    if len(kinds) == 1:
        token = find_change_token(text, kinds[0])
        if token:
            edit = AttributeEdit(kind=kinds[0], change=token)
    return SingleAttributeInstruction(text=text, edit=edit)


def parse_response(raw: str, expected_n: int | None = None) -> InstructionChain:
    """Parse completion text into a chain.

    Accepts "1.", "1)", "Step 1:", and -/*/bullet prefixes, looking only
    after the final "Output" marker when one exists. Surrounding quotes
    are trimmed.
    """
    items = _extract_items(raw)
    if not items:
        raise MalformedOutput(f"no instruction items found in {raw!r}")
    if expected_n is not None and len(items) != expected_n:
        raise CountMismatch(
            f"expected {expected_n} instructions, parsed {len(items)}"
        )
    try:
        return InstructionChain(
            steps=tuple(step_from_text(t) for t in items),
            provenance="llm",
            raw_response=raw,
        )
    except DuplicateAttribute as exc:
        raise MalformedOutput(str(exc)) from exc


def render_chain(chain: InstructionChain) -> str:
    """Canonical serialization; parse_response is idempotent over it."""
    lines = [f"{i}. {step.text}" for i, step in enumerate(chain.steps, 1)]
    return "Output:\n" + "\n".join(lines)


# --- LLM path ---------------------------------------------------------------

@dataclass(frozen=True)
class DecompositionResult:
    chain: InstructionChain
    recognized_hint: tuple[AttributeKind, ...] | None
    raw_response: str
    attempts: int

    def __post_init__(self) -> None:
        if self.chain.provenance != "llm":
            raise ValueError("LLM decomposition must carry llm provenance")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")


_HINT_LINE = re.compile(
    r"involves?\s+\d+\s+attribute\s+changes?\s*:?\s*([^\n]+)", re.IGNORECASE
)


def _parse_hint(raw: str) -> tuple[AttributeKind, ...] | None:
    m = _HINT_LINE.search(raw)
    if not m:
        return None
    kinds = []
    for name in re.split(r"[,\s]+", m.group(1).strip()):
        try:
            kinds.append(AttributeKind(name.lower().strip(".")))
        except ValueError:
            continue
    return tuple(kinds) or None


def decompose_llm(
    instr: MultiAttributeInstruction,
    completer: TextCompleter,
    template: PromptTemplate | None = None,
    max_retries: int = 2,
) -> DecompositionResult:
    """Prompt the completer and parse its answer, retrying on parse or
    validation failure with a fresh completion each time.

    Count mismatches against the known ground-truth N are treated as
    failures; a chain whose kinds merely disagree with ground truth is
    returned as-is (metrics report the disagreement, we do not loop on
    it). Backend transport errors are not retried here; the HTTP client
    owns that policy.
    """
    template = template or load_prompt_template()
    prompt = build_prompt(instr, template)
    expected = len(instr.edits)
    last_error: Exception | None = None
    last_raw = ""
    attempts = 0
    while attempts <= max_retries:
        attempts += 1
        raw = completer.complete(prompt, temperature=0.0, max_tokens=256)
        last_raw = raw
        try:
            chain = parse_response(raw, expected_n=expected)
            for step in chain.steps:
                kinds = detect_attributes(step.text)
                if len(kinds) > 1:
                    raise MalformedOutput(
                        f"step {step.text!r} mentions several attributes: "
                        f"{', '.join(k.value for k in kinds)}"
                    )
        except (MalformedOutput, CountMismatch) as exc:
            last_error = exc
            continue
        return DecompositionResult(
            chain=chain,
            recognized_hint=_parse_hint(raw),
            raw_response=raw,
            attempts=attempts,
        )
    raise DecompositionFailed(
        f"no valid chain after {attempts} attempt(s): {last_error}",
        raw_response=last_raw,
    )


# --- rule-based path --------------------------------------------------------

def split_attributed_fragments(text: str) -> list[str]:
    """Split at top-level conjunctions; fragments without any detected
    attribute are folded into the neighbouring attributed fragment
    (preceding when one exists, otherwise the next one)."""
    texts: list[str] = []
    leading: list[str] = []
    for frag in split_clauses(text):
        if detect_attributes(frag):
            if leading:
                frag = " ".join(leading + [frag])
                leading = []
            texts.append(frag)
        elif texts:
            texts[-1] = f"{texts[-1]} {frag}"
        else:
            leading.append(frag)
    if not texts:
        raise UnsplittableInstruction(f"no attribute keywords found in {text!r}")
    return texts


def decompose_rule_based(instr: MultiAttributeInstruction) -> InstructionChain:
    """One step per attributed fragment of the compound text, with the
    ground-truth edits re-attached where a fragment pins down one kind."""
    texts = split_attributed_fragments(instr.text)
    by_kind = {e.kind: e for e in instr.edits}
    steps = []
    for text in texts:
        kinds = detect_attributes(text)
        edit = None
        if len(kinds) == 1:
            edit = by_kind.get(kinds[0])
            if edit is None:
                token = find_change_token(text, kinds[0])
                if token:
                    edit = AttributeEdit(kind=kinds[0], change=token)
        steps.append(SingleAttributeInstruction(text=text, edit=edit))
    return InstructionChain(steps=tuple(steps), provenance="rule_based")
