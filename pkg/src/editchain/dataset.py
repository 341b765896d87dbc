"""Triplet dataset construction: (instruction, input face, output face).

Per face and attribute edit: caption the face, rewrite the caption for
the requested change, run the paired editor on the caption pair, then
composite the result back over the original through the attribute's
region mask. Output pixels outside the mask are the input's, exactly.
Triplets pass a two-stage filter (caption similarity and face quality)
before being written; rejects are logged with reasons, never written.

The build journals every finished triplet id, so an interrupted run can
resume without redoing work, and the final manifest is compiled from
the journal in sorted order: byte-identical however many times the run
was stopped and restarted.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import __version__
from .errors import (
    AmbiguousPart,
    EditChainError,
    LayoutError,
    MissingMask,
)
from .imaging import (
    FaceImage,
    RegionMask,
    composite,
    load_mask_png,
    load_png,
    masked_mean_abs_diff,
    resize,
    save_mask_png,
    save_png,
    union_masks,
)
from .instructions import AttributeEdit, SingleAttributeInstruction, render_instruction
from .metrics import clip_sim, quality, target_caption
from .taxonomy import ALL_KINDS, AttributeKind

logger = logging.getLogger(__name__)

PIPELINE_VERSION = f"editchain-{__version__}"

DEFAULT_TAU_CLIP = 0.25
DEFAULT_TAU_Q = 0.5

PART_NAMES = ("hair", "skin", "l_eye", "r_eye", "beard", "glasses", "mouth")

_DIRECT_PARTS = {
    AttributeKind.HAIR: "hair",
    AttributeKind.SKIN: "skin",
    AttributeKind.BEARD: "beard",
    AttributeKind.GLASSES: "glasses",
}
_FULL_FACE_KINDS = (AttributeKind.AGE, AttributeKind.GENDER, AttributeKind.ANIME)

MANIFEST_FILE = "manifest.jsonl"
JOURNAL_FILE = "journal.log"
SUMMARY_FILE = "summary.md"


# --- domain types -----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class EditTriplet:
    triplet_id: str
    face_id: str
    instruction: SingleAttributeInstruction
    input_ref: str
    output_ref: str
    mask_ref: str
    source_caption: str
    target_caption: str
    clip_score: float
    quality_score: float
    accepted: bool = False

    def __post_init__(self) -> None:
        if self.instruction.edit is None:
            raise ValueError("a triplet's instruction must carry its edit")

    @property
    def kind(self) -> AttributeKind:
        return self.instruction.edit.kind

    @property
    def change(self) -> str:
        return self.instruction.edit.change

    @property
    def input_path(self) -> str:
        return f"images/{self.input_ref}.png"

    @property
    def output_path(self) -> str:
        return f"images/{self.output_ref}.png"

    @property
    def mask_path(self) -> str:
        return f"masks/{self.mask_ref}.png"


def triplet_to_json(t: EditTriplet) -> dict:
    return {
        "triplet_id": t.triplet_id,
        "face_id": t.face_id,
        "attribute": t.kind.value,
        "change": t.change,
        "instruction": t.instruction.text,
        "input_ref": t.input_ref,
        "output_ref": t.output_ref,
        "mask_ref": t.mask_ref,
        "input_path": t.input_path,
        "output_path": t.output_path,
        "mask_path": t.mask_path,
        "source_caption": t.source_caption,
        "target_caption": t.target_caption,
        "clip_score": float(t.clip_score),
        "quality_score": float(t.quality_score),
        "accepted": bool(t.accepted),
    }


def triplet_from_json(data: dict) -> EditTriplet:
    edit = AttributeEdit(AttributeKind(data["attribute"]), data["change"])
    return EditTriplet(
        triplet_id=data["triplet_id"],
        face_id=data["face_id"],
        instruction=SingleAttributeInstruction(data["instruction"], edit),
        input_ref=data["input_ref"],
        output_ref=data["output_ref"],
        mask_ref=data["mask_ref"],
        source_caption=data["source_caption"],
        target_caption=data["target_caption"],
        clip_score=data["clip_score"],
        quality_score=data["quality_score"],
        accepted=data["accepted"],
    )


@dataclass
class DatasetManifest:
    entries: list[EditTriplet]
    tau_clip: float
    tau_q: float
    pipeline_version: str = PIPELINE_VERSION

    def __len__(self) -> int:
        return len(self.entries)


# --- mask ingestion ---------------------------------------------------------


def parse_part_filename(name: str) -> tuple[str, str]:
    """<face_id>_<part>.png -> (face_id, part). Part names may contain
    underscores, so match known suffixes longest-first."""
    if not name.endswith(".png"):
        raise LayoutError(f"annotation file {name!r} is not a PNG")
    stem = name[: -len(".png")]
    for part in sorted(PART_NAMES, key=len, reverse=True):
        suffix = f"_{part}"
        if stem.endswith(suffix) and stem != suffix:
            return stem[: -len(suffix)], part
    raise LayoutError(
        f"annotation file {name!r} does not end in a known part name "
        f"(expected one of {', '.join(PART_NAMES)})"
    )


def ingest_masks(
    annotation_root: str | Path,
) -> dict[str, dict[AttributeKind, RegionMask]]:
    """Collect per-face attribute masks from part mask files.

    Direct parts map one-to-one (hair, skin, beard, glasses); the two
    eye parts union into one eyes mask; age, gender, and anime span
    the whole face; expression uses mouth plus eyes when those parts
    exist, otherwise the whole face. Faces missing a part simply lack
    that attribute's entry.
    """
    root = Path(annotation_root)
    if not root.is_dir():
        raise LayoutError(f"annotation root {root} is not a directory")
    found: dict[tuple[str, str], RegionMask] = {}
    for path in sorted(root.rglob("*.png")):
        face_id, part = parse_part_filename(path.name)
        if (face_id, part) in found:
            raise AmbiguousPart(
                f"part {part!r} for face {face_id!r} appears more than once "
                f"under {root}"
            )
        found[(face_id, part)] = load_mask_png(path)

    result: dict[str, dict[AttributeKind, RegionMask]] = {}
    for face_id in sorted({f for f, _ in found}):
        parts = {p: m for (f, p), m in found.items() if f == face_id}
        dims = {(m.width, m.height) for m in parts.values()}
        if len(dims) > 1:
            raise LayoutError(
                f"mask dimensions disagree for face {face_id!r}: {sorted(dims)}"
            )
        (w, h) = next(iter(dims))

        kind_masks: dict[AttributeKind, RegionMask] = {}
        for kind, part in _DIRECT_PARTS.items():
            if part in parts:
                kind_masks[kind] = RegionMask.from_array(
                    parts[part].bits, attribute=kind
                )
            else:
                logger.debug("face %s: no %s part", face_id, part)
        eye_parts = [parts[p] for p in ("l_eye", "r_eye") if p in parts]
        if eye_parts:
            kind_masks[AttributeKind.EYES] = RegionMask.from_array(
                union_masks(eye_parts).bits, attribute=AttributeKind.EYES
            )
        for kind in _FULL_FACE_KINDS:
            kind_masks[kind] = RegionMask.full(w, h, attribute=kind)
        expression_parts = [
            parts[p] for p in ("mouth", "l_eye", "r_eye") if p in parts
        ]
        if expression_parts:
            kind_masks[AttributeKind.EXPRESSION] = RegionMask.from_array(
                union_masks(expression_parts).bits,
                attribute=AttributeKind.EXPRESSION,
            )
        else:
            kind_masks[AttributeKind.EXPRESSION] = RegionMask.full(
                w, h, attribute=AttributeKind.EXPRESSION
            )
        result[face_id] = kind_masks
    return result


# --- triplet generation -----------------------------------------------------


def generate_triplet(
    face: FaceImage,
    edit: AttributeEdit,
    masks: Mapping[AttributeKind, RegionMask],
    backends,
    face_id: str | None = None,
    phrasing_seed: int | str = 0,
    store: dict[str, object] | None = None,
) -> EditTriplet:
    """One candidate triplet: caption, rewrite, paired edit, composite,
    score. Acceptance is decided later by the filter.

    When `store` is given, the images the triplet references are
    deposited there under their content ids.
    """
    mask = masks.get(edit.kind)
    if mask is None:
        raise MissingMask(f"no mask available for attribute {edit.kind.value}")
    if face_id is None:
        face_id = face.content_id[:12]

    instruction = render_instruction(edit, rng_seed=phrasing_seed)
    source_caption = backends.caption(face)
    rewritten = target_caption(source_caption, instruction, backends)
    paired = backends.pair_edit(face, source_caption, rewritten)
    paired = resize(paired, face.width, face.height)
    output = composite(face, paired, mask)

    triplet = EditTriplet(
        triplet_id=f"{face_id}:{edit.kind.value}:{edit.change}",
        face_id=face_id,
        instruction=instruction,
        input_ref=face.content_id,
        output_ref=output.content_id,
        mask_ref=mask.content_id,
        source_caption=source_caption,
        target_caption=rewritten,
        clip_score=float(clip_sim(output, rewritten, backends)),
        quality_score=quality(output, backends),
    )
    if store is not None:
        store[face.content_id] = face
        store[output.content_id] = output
        store[mask.content_id] = mask
    return triplet


def filter_triplet(
    t: EditTriplet, tau_clip: float = DEFAULT_TAU_CLIP, tau_q: float = DEFAULT_TAU_Q
) -> tuple[bool, tuple[str, ...]]:
    """Closed thresholds: a score exactly at its threshold passes.
    Returns (accepted, names of the failing criteria)."""
    reasons = []
    if not t.clip_score >= tau_clip:
        reasons.append("clip")
    if not t.quality_score >= tau_q:
        reasons.append("quality")
    return (not reasons, tuple(reasons))


# --- build ------------------------------------------------------------------


@dataclass(frozen=True)
class PlanItem:
    kind: AttributeKind
    changes: tuple[str, ...]
    max_samples: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "changes", tuple(self.changes))
        for change in self.changes:
            AttributeEdit(self.kind, change)  # vocabulary check
        if self.max_samples is not None and self.max_samples < 0:
            raise ValueError("max_samples must be non-negative")


def parse_edit_plan(data: Mapping[str, object]) -> list[PlanItem]:
    """JSON form: {"hair": ["red", "blonde"]} or
    {"hair": {"changes": ["red"], "max_samples": 10}}."""
    items = []
    for key, value in data.items():
        kind = AttributeKind(key)
        if isinstance(value, Mapping):
            items.append(
                PlanItem(
                    kind,
                    tuple(value["changes"]),
                    value.get("max_samples"),
                )
            )
        else:
            items.append(PlanItem(kind, tuple(value)))
    return items


@dataclass(frozen=True)
class BuildConfig:
    output_root: str | Path
    tau_clip: float = DEFAULT_TAU_CLIP
    tau_q: float = DEFAULT_TAU_Q
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class CorpusFace:
    face_id: str
    image_path: Path
    annotation_dir: Path


def read_corpus(manifest_path: str | Path) -> list[CorpusFace]:
    """JSONL of {face_id, image_path, annotation_dir}; relative paths
    resolve against the manifest's directory."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    faces = []
    with open(manifest_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            faces.append(
                CorpusFace(
                    face_id=row["face_id"],
                    image_path=base / row["image_path"],
                    annotation_dir=base / row["annotation_dir"],
                )
            )
    seen = [f.face_id for f in faces]
    if len(seen) != len(set(seen)):
        raise LayoutError("corpus manifest repeats a face_id")
    return sorted(faces, key=lambda f: f.face_id)


def plan_work(
    corpus: Sequence[CorpusFace], edit_plan: Sequence[PlanItem]
) -> list[tuple[CorpusFace, AttributeEdit]]:
    """Cross faces with each plan item's change tokens, face-major,
    stopping at the item's quota. Fully deterministic."""
    work = []
    for item in edit_plan:
        taken = 0
        for face in corpus:
            for change in item.changes:
                if item.max_samples is not None and taken >= item.max_samples:
                    break
                work.append((face, AttributeEdit(item.kind, change)))
                taken += 1
            else:
                continue
            break
    return work


def _read_journal(path: Path) -> dict[str, dict]:
    records: dict[str, dict] = {}
    if not path.exists():
        return records
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            records[row["triplet_id"]] = row
    return records


def build_dataset(
    corpus_manifest: str | Path,
    edit_plan: Sequence[PlanItem],
    config: BuildConfig,
    backends,
) -> DatasetManifest:
    """Generate, filter, and write the dataset under the output root.

    Every finished triplet is journaled; rerunning with the same
    arguments skips journaled triplets (errored ones are retried) and
    recompiles the same manifest byte for byte.
    """
    root = Path(config.output_root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    journal_path = root / JOURNAL_FILE

    corpus = read_corpus(corpus_manifest)
    journaled = _read_journal(journal_path)
    done = {tid for tid, row in journaled.items() if row["status"] != "error"}

    mask_cache: dict[Path, dict[str, dict[AttributeKind, RegionMask]]] = {}

    def masks_for(face: CorpusFace) -> dict[AttributeKind, RegionMask]:
        ann = face.annotation_dir
        if ann not in mask_cache:
            mask_cache[ann] = ingest_masks(ann)
        return mask_cache[ann].get(face.face_id, {})

    journal_lock = threading.Lock()

    def record(row: dict) -> None:
        with journal_lock:
            with open(journal_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                fh.flush()

    def process(face_entry: CorpusFace, edit: AttributeEdit) -> None:
        triplet_id = f"{face_entry.face_id}:{edit.kind.value}:{edit.change}"
        try:
            face = load_png(face_entry.image_path)
            store: dict[str, object] = {}
            triplet = generate_triplet(
                face,
                edit,
                masks_for(face_entry),
                backends,
                face_id=face_entry.face_id,
                phrasing_seed=(
                    f"{config.seed}:{face_entry.face_id}"
                    f":{edit.kind.value}:{edit.change}"
                ),
                store=store,
            )
            accepted, reasons = filter_triplet(triplet, config.tau_clip, config.tau_q)
            triplet = replace(triplet, accepted=accepted)
            if accepted:
                for ref, obj in store.items():
                    if isinstance(obj, RegionMask):
                        save_mask_png(obj, root / "masks" / f"{ref}.png")
                    else:
                        save_png(obj, root / "images" / f"{ref}.png")
                record(
                    {
                        "triplet_id": triplet_id,
                        "status": "accepted",
                        "entry": triplet_to_json(triplet),
                    }
                )
            else:
                record(
                    {
                        "triplet_id": triplet_id,
                        "status": "rejected",
                        "reasons": list(reasons),
                    }
                )
        except MissingMask as exc:
            record(
                {"triplet_id": triplet_id, "status": "skipped", "reason": str(exc)}
            )
        except EditChainError as exc:
            logger.warning("triplet %s failed: %s", triplet_id, exc)
            record(
                {
                    "triplet_id": triplet_id,
                    "status": "error",
                    "reason": f"{type(exc).__name__}: {exc}",
                }
            )

    pending = [
        (face, edit)
        for face, edit in plan_work(corpus, edit_plan)
        if f"{face.face_id}:{edit.kind.value}:{edit.change}" not in done
    ]
    if config.workers == 1:
        for face, edit in pending:
            process(face, edit)
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for future in [pool.submit(process, f, e) for f, e in pending]:
                future.result()

    entries = [
        triplet_from_json(row["entry"])
        for row in _read_journal(journal_path).values()
        if row["status"] == "accepted"
    ]
    entries.sort(key=lambda t: t.triplet_id)
    manifest = DatasetManifest(
        entries=entries, tau_clip=config.tau_clip, tau_q=config.tau_q
    )
    write_manifest(manifest, root)
    (root / SUMMARY_FILE).write_text(render_summary_md(manifest))
    return manifest


# --- manifest io, summary, validation ---------------------------------------


def write_manifest(manifest: DatasetManifest, root: str | Path) -> Path:
    """First line is a header (version, thresholds, counts); each
    following line is one accepted triplet."""
    root = Path(root)
    rows = summarize(manifest)
    header = {
        "pipeline_version": manifest.pipeline_version,
        "tau_clip": manifest.tau_clip,
        "tau_q": manifest.tau_q,
        "total_samples": len(manifest.entries),
        "per_attribute": {
            row["attribute"]: {"ids": row["ids"], "samples": row["samples"]}
            for row in rows
            if row["attribute"] != "total"
        },
    }
    path = root / MANIFEST_FILE
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for entry in manifest.entries:
            fh.write(json.dumps(triplet_to_json(entry), sort_keys=True) + "\n")
    return path


def load_manifest(root: str | Path) -> DatasetManifest:
    path = Path(root) / MANIFEST_FILE
    with open(path) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise LayoutError(f"{path} is empty")
    header = json.loads(lines[0])
    entries = [triplet_from_json(json.loads(line)) for line in lines[1:]]
    return DatasetManifest(
        entries=entries,
        tau_clip=header["tau_clip"],
        tau_q=header["tau_q"],
        pipeline_version=header["pipeline_version"],
    )


def summarize(manifest: DatasetManifest) -> list[dict]:
    """One row per attribute kind plus a total row: distinct face ids,
    sample count, and the change vocabulary observed."""
    rows = []
    total_ids: set[str] = set()
    for kind in ALL_KINDS:
        members = [t for t in manifest.entries if t.kind is kind]
        ids = {t.face_id for t in members}
        total_ids |= ids
        rows.append(
            {
                "attribute": kind.value,
                "ids": len(ids),
                "samples": len(members),
                "changes": sorted({t.change for t in members}),
            }
        )
    rows.append(
        {
            "attribute": "total",
            "ids": len(total_ids),
            "samples": sum(r["samples"] for r in rows),
            "changes": [],
        }
    )
    return rows


def render_summary_md(manifest: DatasetManifest) -> str:
    rows = summarize(manifest)
    lines = [
        "# Dataset summary",
        "",
        f"Pipeline: {manifest.pipeline_version}; thresholds: "
        f"clip >= {manifest.tau_clip}, quality >= {manifest.tau_q}",
        "",
        "| attribute | ids | samples | changes |",
        "| --- | ---: | ---: | --- |",
    ]
    for row in rows:
        changes = ", ".join(row["changes"])
        lines.append(
            f"| {row['attribute']} | {row['ids']} | {row['samples']} | {changes} |"
        )
    lines.append("")
    return "\n".join(lines)


def validate(root: str | Path) -> list[str]:
    """Structural checks over a built dataset; returns human-readable
    problems, empty when the dataset is sound."""
    root = Path(root)
    problems: list[str] = []
    try:
        manifest = load_manifest(root)
    except (OSError, LayoutError, KeyError, ValueError) as exc:
        return [f"manifest unreadable: {exc}"]

    header = json.loads((root / MANIFEST_FILE).read_text().splitlines()[0])
    recount = {
        row["attribute"]: row
        for row in summarize(manifest)
    }
    for attr, counts in header.get("per_attribute", {}).items():
        row = recount.get(attr)
        if row is None or [counts["ids"], counts["samples"]] != [
            row["ids"],
            row["samples"],
        ]:
            problems.append(f"header counts disagree with entries for {attr}")
    if header.get("total_samples") != len(manifest.entries):
        problems.append("header total_samples disagrees with entry count")
    summed = sum(
        counts["samples"] for counts in header.get("per_attribute", {}).values()
    )
    if summed != header.get("total_samples"):
        problems.append("per-attribute samples do not sum to the total")

    for t in manifest.entries:
        prefix = f"triplet {t.triplet_id}"
        paths = {
            "input": root / t.input_path,
            "output": root / t.output_path,
            "mask": root / t.mask_path,
        }
        missing = [name for name, p in paths.items() if not p.exists()]
        if missing:
            problems.append(f"{prefix}: missing files {missing}")
            continue
        accepted, _ = filter_triplet(t, manifest.tau_clip, manifest.tau_q)
        if t.accepted != accepted:
            problems.append(f"{prefix}: accepted flag disagrees with scores")
        input_img = load_png(paths["input"])
        output_img = load_png(paths["output"])
        mask = load_mask_png(paths["mask"])
        if input_img.content_id != t.input_ref:
            problems.append(f"{prefix}: input file does not match its ref")
        if output_img.content_id != t.output_ref:
            problems.append(f"{prefix}: output file does not match its ref")
        if masked_mean_abs_diff(input_img, output_img, mask) != 0.0:
            problems.append(f"{prefix}: output differs from input outside mask")
    return problems
