"""Step-by-step execution of instruction chains, with full traces.

A run applies each instruction in order: optionally upscale the previous
output, then hand it to the editor with the step's text. Every image the
run touches goes into a content-addressed store so a trace can be saved,
reloaded, and replayed bit-for-bit. A backend failure aborts the run at
the failing step; the partial trace is kept, with the failure recorded
both on the step and at run level.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import EditChainError
from .imaging import FaceImage, load_png, save_png
from .instructions import (
    AttributeEdit,
    InstructionChain,
    MultiAttributeInstruction,
    SingleAttributeInstruction,
)
from .taxonomy import AttributeKind

STATUS_APPLIED = "applied"
STATUS_ERROR = "backend_error"

TRACE_FILE = "trace.json"


@dataclass(frozen=True)
class EditStep:
    """One executed (or attempted) chain step.

    `input_ref` is the image the step started from, before any
    super-resolution. `post_sr_ref` is set when an upscale ran for this
    step. A failed step keeps `output_ref == input_ref`: no edit output
    exists, and downstream linkage stays well-defined.
    """

    index: int  # 1-based
    instruction: SingleAttributeInstruction
    input_ref: str
    output_ref: str
    post_sr_ref: str | None = None
    wall_time_ms: float = 0.0
    status: str = STATUS_APPLIED

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("step index is 1-based")
        if self.status not in (STATUS_APPLIED, STATUS_ERROR):
            raise ValueError(f"unknown step status {self.status!r}")
        if self.wall_time_ms < 0:
            raise ValueError("wall time must be non-negative")


@dataclass
class EditTrace:
    input_ref: str
    steps: tuple[EditStep, ...]
    final_ref: str
    config_snapshot: dict
    image_store: dict[str, FaceImage]
    error: str | None = None

    def __post_init__(self) -> None:
        self.steps = tuple(self.steps)
        expected = self.input_ref
        for step in self.steps:
            if step.input_ref != expected:
                raise ValueError(
                    f"step {step.index} input {step.input_ref[:12]} does not "
                    f"follow previous output {expected[:12]}"
                )
            expected = step.output_ref
        if self.final_ref != expected:
            raise ValueError("final_ref must be the last output (or the input)")
        for ref in self.referenced_ids():
            if ref not in self.image_store:
                raise ValueError(f"trace references missing image {ref[:12]}")

    def referenced_ids(self) -> set[str]:
        refs = {self.input_ref, self.final_ref}
        for step in self.steps:
            refs.update({step.input_ref, step.output_ref})
            if step.post_sr_ref is not None:
                refs.add(step.post_sr_ref)
        return refs

    def image(self, ref: str) -> FaceImage:
        return self.image_store[ref]

    @property
    def final_image(self) -> FaceImage:
        return self.image_store[self.final_ref]

    @property
    def ok(self) -> bool:
        return self.error is None


def describe_backend(backend: object) -> object:
    """A JSON-friendly tag for the config snapshot."""
    from .backends.client import HttpBackendSuite
    from .backends.mock import MockBackendSuite

    if isinstance(backend, MockBackendSuite):
        return "mock"
    if isinstance(backend, HttpBackendSuite):
        return {name: ep.base_url for name, ep in sorted(backend.endpoints.items())}
    return type(backend).__name__


def run_chain(
    x0: FaceImage,
    chain: InstructionChain,
    editor,
    sr=None,
) -> EditTrace:
    """Execute the chain strictly in order.

    With `sr` given, each step upscales the previous output before
    editing; the final image is always post-edit, never post-upscale.
    """
    store: dict[str, FaceImage] = {x0.content_id: x0}
    steps: list[EditStep] = []
    error: str | None = None
    current = x0
    for index, instr in enumerate(chain.steps, start=1):
        started = time.perf_counter()
        input_ref = current.content_id
        post_sr_ref: str | None = None
        try:
            staged = current
            if sr is not None:
                staged = sr.sr(current)
                store[staged.content_id] = staged
                post_sr_ref = staged.content_id
            output = editor.edit(staged, instr.text)
        except EditChainError as exc:
            elapsed = (time.perf_counter() - started) * 1000.0
            steps.append(
                EditStep(
                    index=index,
                    instruction=instr,
                    input_ref=input_ref,
                    output_ref=input_ref,
                    post_sr_ref=post_sr_ref,
                    wall_time_ms=elapsed,
                    status=STATUS_ERROR,
                )
            )
            error = f"step {index} ({instr.text!r}): {exc}"
            break
        elapsed = (time.perf_counter() - started) * 1000.0
        store[output.content_id] = output
        steps.append(
            EditStep(
                index=index,
                instruction=instr,
                input_ref=input_ref,
                output_ref=output.content_id,
                post_sr_ref=post_sr_ref,
                wall_time_ms=elapsed,
                status=STATUS_APPLIED,
            )
        )
        current = output
    return EditTrace(
        input_ref=x0.content_id,
        steps=tuple(steps),
        final_ref=steps[-1].output_ref if steps else x0.content_id,
        config_snapshot={
            "editor": describe_backend(editor),
            "sr": describe_backend(sr) if sr is not None else None,
            "sr_enabled": sr is not None,
            "chain_provenance": chain.provenance,
            "mode": "chain",
        },
        image_store=store,
        error=error,
    )


def run_single_shot(
    x0: FaceImage, instr: MultiAttributeInstruction, editor
) -> EditTrace:
    """The one-pass baseline: the whole compound sentence as a single
    edit call, no upscaling."""
    step = SingleAttributeInstruction(text=instr.text, edit=None)
    trace = run_chain(
        x0, InstructionChain(steps=(step,), provenance="manual"), editor, sr=None
    )
    trace.config_snapshot["mode"] = "single_shot"
    return trace


# --- persistence ------------------------------------------------------------


def _step_to_json(step: EditStep) -> dict:
    edit = step.instruction.edit
    return {
        "index": step.index,
        "text": step.instruction.text,
        "edit": None if edit is None else {"kind": edit.kind.value, "change": edit.change},
        "input_ref": step.input_ref,
        "post_sr_ref": step.post_sr_ref,
        "output_ref": step.output_ref,
        "wall_time_ms": step.wall_time_ms,
        "status": step.status,
    }


def _step_from_json(data: dict) -> EditStep:
    raw_edit = data["edit"]
    edit = (
        None
        if raw_edit is None
        else AttributeEdit(AttributeKind(raw_edit["kind"]), raw_edit["change"])
    )
    return EditStep(
        index=data["index"],
        instruction=SingleAttributeInstruction(text=data["text"], edit=edit),
        input_ref=data["input_ref"],
        output_ref=data["output_ref"],
        post_sr_ref=data["post_sr_ref"],
        wall_time_ms=data["wall_time_ms"],
        status=data["status"],
    )


def save_trace(trace: EditTrace, directory: str | Path) -> Path:
    """Persist as trace.json plus one PNG per stored image, named by
    content id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "input_ref": trace.input_ref,
        "final_ref": trace.final_ref,
        "error": trace.error,
        "config_snapshot": trace.config_snapshot,
        "steps": [_step_to_json(s) for s in trace.steps],
        "images": sorted(trace.image_store),
    }
    for ref in sorted(trace.image_store):
        save_png(trace.image_store[ref], directory / f"{ref}.png")
    path = directory / TRACE_FILE
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return directory


def load_trace(directory: str | Path) -> EditTrace:
    directory = Path(directory)
    payload = json.loads((directory / TRACE_FILE).read_text())
    store: dict[str, FaceImage] = {}
    for ref in payload["images"]:
        img = load_png(directory / f"{ref}.png")
        if img.content_id != ref:
            raise ValueError(f"stored image {ref[:12]} does not match its name")
        store[ref] = img
    return EditTrace(
        input_ref=payload["input_ref"],
        steps=tuple(_step_from_json(s) for s in payload["steps"]),
        final_ref=payload["final_ref"],
        config_snapshot=payload["config_snapshot"],
        image_store=store,
        error=payload["error"],
    )
