"""Per-sample evaluation and grouped aggregation.

Four numbers describe one edited sample: similarity between the result
image and its target caption, per-attribute correctness judgements,
mean absolute pixel change outside the edited regions, and a face
quality score. Aggregation groups samples by (model tag, attribute
count), pools correctness over attributes rather than averaging
per-sample ratios, and renders signed percentage deltas against a
named baseline.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyInput, ProtocolError, UnknownBaseline
from .executor import STATUS_APPLIED, EditStep, EditTrace
from .imaging import (
    DiffValue,
    FaceImage,
    RegionMask,
    masked_mean_abs_diff,
    resize,
    union_masks,
)
from .instructions import (
    AttributeEdit,
    MultiAttributeInstruction,
    detect_attributes,
)
from .taxonomy import AttributeKind

REWRITE_MARKER = "Rewritten caption:"

METRIC_KEYS = ("clip_sim_mean", "coverage", "preserve_l1_mean", "quality_mean")


class SimValue(float):
    """A cosine similarity that remembers whether either embedding was
    all-zero (no recognizable content); the value is then 0 by
    convention, not by measurement."""

    no_signal: bool

    def __new__(cls, value: float, no_signal: bool = False) -> "SimValue":
        out = super().__new__(cls, value)
        out.no_signal = no_signal
        return out


def clip_sim(result: FaceImage, target_caption: str, embedder) -> SimValue:
    """Cosine similarity between the image embedding and the caption
    embedding."""
    image_vec = np.asarray(embedder.embed(image=result), dtype=np.float64)
    text_vec = np.asarray(embedder.embed(text=target_caption), dtype=np.float64)
    image_norm = float(np.linalg.norm(image_vec))
    text_norm = float(np.linalg.norm(text_vec))
    if image_norm == 0.0 or text_norm == 0.0:
        return SimValue(0.0, no_signal=True)
    value = float(np.dot(image_vec, text_vec) / (image_norm * text_norm))
    return SimValue(max(-1.0, min(1.0, value)))


def preserve_l1(
    input_image: FaceImage,
    output_image: FaceImage,
    target_masks: Sequence[RegionMask],
) -> DiffValue:
    """Mean |output - input| per channel over pixels outside the union
    of the target regions, 0-255 scale. The output is resized to the
    input's dimensions first; masks are in input coordinates."""
    output_image = resize(output_image, input_image.width, input_image.height)
    exclude = union_masks(list(target_masks)) if target_masks else None
    return masked_mean_abs_diff(input_image, output_image, exclude)


def quality(img: FaceImage, scorer) -> float:
    """Pass the image to the quality backend; the score must land in
    [0, 1]."""
    score = scorer.quality(img)
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        raise ProtocolError(f"quality score must be numeric, got {score!r}")
    score = float(score)
    if not math.isfinite(score) or not 0.0 <= score <= 1.0:
        raise ProtocolError(f"quality score out of range [0, 1]: {score}")
    return score


# --- correctness ------------------------------------------------------------


def _step_claiming(trace: EditTrace, kind: AttributeKind) -> EditStep | None:
    for step in trace.steps:
        if step.instruction.edit is not None:
            kinds = [step.instruction.edit.kind]
        else:
            kinds = detect_attributes(step.instruction.text)
        if kind in kinds:
            return step
    return None


def judge_required_edits(
    trace: EditTrace, edits: Sequence[AttributeEdit], judge
) -> tuple[bool, ...]:
    """One boolean per required edit.

    Each edit is judged on the step that claims its attribute (by the
    step's declared edit, or by the attributes its text mentions): did
    that step change exactly this attribute, nothing else? Edits no
    step claims, and edits claimed by failed steps, count as incorrect;
    an aborted chain is a real failure mode, not missing data.
    """
    results = []
    for edit in edits:
        step = _step_claiming(trace, edit.kind)
        if step is None or step.status != STATUS_APPLIED:
            results.append(False)
            continue
        results.append(
            bool(
                judge.judge(
                    trace.image(step.input_ref), trace.image(step.output_ref), edit
                )
            )
        )
    return tuple(results)


# --- target captions --------------------------------------------------------


class CaptionCache:
    """(original caption, instruction text) -> rewritten caption.

    Reads are lock-free on the GIL-safe dict; writes are serialized.
    """

    def __init__(self) -> None:
        self._data: dict[tuple[str, str], str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: tuple[str, str]) -> str | None:
        value = self._data.get(key)
        if value is None:
            self.misses += 1
        else:
            self.hits += 1
        return value

    def put(self, key: tuple[str, str], value: str) -> None:
        with self._lock:
            self._data[key] = value


def build_rewrite_prompt(caption: str, instruction_text: str) -> str:
    return (
        "Rewrite the face caption so it reflects the requested changes. "
        "Keep everything else unchanged.\n"
        f"Caption: {caption}\n"
        f"Instruction: {instruction_text}\n"
        f"{REWRITE_MARKER}"
    )


def target_caption(
    original_caption: str,
    instr: MultiAttributeInstruction,
    completer,
    cache: CaptionCache | None = None,
) -> str:
    """What the result should look like, as text. Cached so repeated
    evaluation never re-calls the completion backend."""
    key = (original_caption, instr.text)
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            return cached
    text = completer.complete(
        build_rewrite_prompt(original_caption, instr.text)
    ).strip()
    if cache is not None:
        cache.put(key, text)
    return text


# --- per-sample record ------------------------------------------------------


@dataclass(frozen=True)
class SampleEvaluation:
    sample_id: str
    model_tag: str
    clip_sim: float
    judgements: tuple[bool, ...]
    preserve_l1: float
    quality: float
    target_caption: str

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "judgements", tuple(bool(j) for j in self.judgements)
        )
        if not self.judgements:
            raise ValueError("a sample carries at least one judgement")
        for name in ("clip_sim", "preserve_l1", "quality"):
            if not math.isfinite(float(getattr(self, name))):
                raise ValueError(f"{name} must be finite")

    @property
    def attribute_count(self) -> int:
        return len(self.judgements)


def evaluation_to_json(ev: SampleEvaluation) -> dict:
    return {
        "sample_id": ev.sample_id,
        "model_tag": ev.model_tag,
        "clip_sim": float(ev.clip_sim),
        "clip_no_signal": bool(getattr(ev.clip_sim, "no_signal", False)),
        "judgements": list(ev.judgements),
        "preserve_l1": float(ev.preserve_l1),
        "preserve_empty_region": bool(getattr(ev.preserve_l1, "empty_region", False)),
        "quality": float(ev.quality),
        "target_caption": ev.target_caption,
    }


def evaluation_from_json(data: dict) -> SampleEvaluation:
    return SampleEvaluation(
        sample_id=data["sample_id"],
        model_tag=data["model_tag"],
        clip_sim=SimValue(data["clip_sim"], no_signal=data.get("clip_no_signal", False)),
        judgements=tuple(data["judgements"]),
        preserve_l1=DiffValue(
            data["preserve_l1"],
            empty_region=data.get("preserve_empty_region", False),
        ),
        quality=data["quality"],
        target_caption=data["target_caption"],
    )


def write_evaluations(path: str | Path, evals: Iterable[SampleEvaluation]) -> None:
    with open(path, "w") as fh:
        for ev in evals:
            fh.write(json.dumps(evaluation_to_json(ev), sort_keys=True) + "\n")


def read_evaluations(path: str | Path) -> list[SampleEvaluation]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(evaluation_from_json(json.loads(line)))
    return out


# --- aggregation ------------------------------------------------------------


def coverage(samples: Sequence[SampleEvaluation]) -> float:
    """Correct attributes over required attributes, pooled across the
    whole set. Not the mean of per-sample ratios: a sample with many
    required edits weighs more."""
    if not samples:
        raise EmptyInput("coverage needs at least one sample")
    correct = sum(sum(ev.judgements) for ev in samples)
    required = sum(len(ev.judgements) for ev in samples)
    return correct / required


def delta_percent(value: float, base: float) -> float:
    return (value - base) / base * 100.0


def render_delta(value: float, base: float) -> str:
    """Signed percent change, two decimals, ties away from zero."""
    if base == 0:
        return "n/a"
    pct = Decimal(str(delta_percent(value, base))).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    sign = "+" if pct >= 0 else ""
    return f"{sign}{pct}%"


GroupKey = tuple[str, int]


@dataclass
class MetricsReport:
    groups: dict[GroupKey, dict[str, float | int]]
    deltas: dict[GroupKey, dict[str, str]] | None = None
    baseline_tag: str | None = None


def aggregate(
    evals: Iterable[SampleEvaluation],
    baseline_tag: str | None = None,
    grouping: Callable[[SampleEvaluation], GroupKey] | None = None,
) -> MetricsReport:
    """Group, average, and (optionally) compare against a baseline.

    Groups default to (model_tag, attribute_count). With a baseline tag,
    every group gets deltas against the baseline group with the same
    attribute count; the baseline's own deltas render as +0.00%.
    """
    evals = list(evals)
    if not evals:
        raise EmptyInput("aggregate needs at least one evaluation")
    if grouping is None:
        grouping = lambda ev: (ev.model_tag, ev.attribute_count)
    buckets: dict[GroupKey, list[SampleEvaluation]] = {}
    for ev in evals:
        buckets.setdefault(grouping(ev), []).append(ev)

    groups: dict[GroupKey, dict[str, float | int]] = {}
    for key in sorted(buckets):
        members = buckets[key]
        n = len(members)
        groups[key] = {
            "clip_sim_mean": sum(float(e.clip_sim) for e in members) / n,
            "coverage": coverage(members),
            "preserve_l1_mean": sum(float(e.preserve_l1) for e in members) / n,
            "quality_mean": sum(float(e.quality) for e in members) / n,
            "n_samples": n,
        }

    deltas = None
    if baseline_tag is not None:
        if not any(tag == baseline_tag for tag, _ in groups):
            known = sorted({tag for tag, _ in groups})
            raise UnknownBaseline(
                f"no group tagged {baseline_tag!r}; present: {known}"
            )
        deltas = {}
        for (tag, count), values in groups.items():
            base = groups.get((baseline_tag, count))
            if base is None:
                continue  # no baseline at this attribute count
            deltas[(tag, count)] = {
                key: render_delta(values[key], base[key]) for key in METRIC_KEYS
            }
    return MetricsReport(groups=groups, deltas=deltas, baseline_tag=baseline_tag)
