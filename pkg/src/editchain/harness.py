"""Test-set construction and experiment orchestration.

A test set freezes everything evaluation needs (faces, compound
instructions with their ground-truth edits, target captions, and the
union mask of the edited regions) so an experiment run only exercises
the editor, upscaler, judge, embedding, and quality backends. Runs are
configured along three axes: decomposition (none / rule-based / LLM),
super-resolution on or off, and which backend stack serves the calls.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backends.mock import MockBackendSuite, band_mask, decode_face, render_face
from .backends.mock import random_states as _random_states
from .dataset import CorpusFace, ingest_masks, read_corpus
from .decomposer import decompose_llm, decompose_rule_based
from .errors import (
    DecompositionFailed,
    EditChainError,
    InsufficientFaces,
    UnsplittableInstruction,
)
from .executor import EditTrace, run_chain, run_single_shot
from .imaging import (
    FaceImage,
    RegionMask,
    load_mask_png,
    load_png,
    save_mask_png,
    save_png,
    union_masks,
)
from .instructions import (
    AttributeEdit,
    InstructionChain,
    MultiAttributeInstruction,
    compose_multi,
)
from .metrics import (
    SampleEvaluation,
    clip_sim,
    judge_required_edits,
    preserve_l1,
    quality,
    read_evaluations,
    target_caption,
    write_evaluations,
)
from .taxonomy import ALL_KINDS, AttributeKind, vocabulary_for

logger = logging.getLogger(__name__)

TESTSET_FILE = "testset.json"
RESULTS_FILE = "results.jsonl"
META_FILE = "meta.json"

DECOMPOSITION_MODES = ("none", "llm", "rule_based")


# --- synthetic corpus -------------------------------------------------------

_PART_BANDS = {
    "hair": AttributeKind.HAIR,
    "skin": AttributeKind.SKIN,
    "beard": AttributeKind.BEARD,
    "glasses": AttributeKind.GLASSES,
    "mouth": AttributeKind.EXPRESSION,
}


def part_masks_for(width: int, height: int) -> dict[str, RegionMask]:
    """Band-aligned part rectangles; the eye band splits into left and
    right halves."""
    masks = {
        part: band_mask(width, height, kind) for part, kind in _PART_BANDS.items()
    }
    eyes = band_mask(width, height, AttributeKind.EYES).bits
    left = eyes.copy()
    left[:, width // 2 :] = False
    right = eyes.copy()
    right[:, : width // 2] = False
    masks["l_eye"] = RegionMask.from_array(left)
    masks["r_eye"] = RegionMask.from_array(right)
    return masks


def make_corpus(
    out_dir: str | Path,
    n_faces: int,
    seed: int = 0,
    width_choices: Sequence[int] = (512,),
) -> Path:
    """Write a synthetic face corpus: faces/, part masks under ann/,
    and a corpus.jsonl manifest. Returns the manifest path."""
    root = Path(out_dir)
    (root / "faces").mkdir(parents=True, exist_ok=True)
    (root / "ann").mkdir(parents=True, exist_ok=True)
    mask_sets = {w: part_masks_for(w, w) for w in set(width_choices)}
    manifest = root / "corpus.jsonl"
    with open(manifest, "w") as fh:
        for i in range(n_faces):
            face_id = f"face{i:04d}"
            rng = random.Random(f"corpus:{seed}:{face_id}")
            width = rng.choice(list(width_choices))
            img = render_face(_random_states(rng), width, width)
            save_png(img, root / "faces" / f"{face_id}.png")
            for part, mask in mask_sets[width].items():
                save_mask_png(mask, root / "ann" / f"{face_id}_{part}.png")
            fh.write(
                json.dumps(
                    {
                        "face_id": face_id,
                        "image_path": f"faces/{face_id}.png",
                        "annotation_dir": "ann",
                    }
                )
                + "\n"
            )
    return manifest


# --- test set ---------------------------------------------------------------


@dataclass(frozen=True)
class TestSetSpec:
    corpus: str | Path
    n_faces: int = 200
    quality_floor: float = 0.7
    attribute_counts: tuple[int, ...] = (2, 3, 4)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_faces < 1:
            raise ValueError("n_faces must be >= 1")
        if not 0.0 <= self.quality_floor <= 1.0:
            raise ValueError("quality_floor must be in [0, 1]")
        object.__setattr__(
            self, "attribute_counts", tuple(self.attribute_counts)
        )
        if not self.attribute_counts or any(
            c < 1 for c in self.attribute_counts
        ):
            raise ValueError("attribute_counts must be positive")


@dataclass(frozen=True)
class TestSetSample:
    sample_id: str
    face_id: str
    face_path: str
    attribute_count: int
    instruction_text: str
    edits: tuple[AttributeEdit, ...]
    target_caption: str
    mask_path: str

    def instruction(self) -> MultiAttributeInstruction:
        return MultiAttributeInstruction(self.instruction_text, self.edits)


@dataclass
class TestSet:
    root: Path
    spec: dict
    testset_hash: str
    samples: list[TestSetSample]

    def load_face(self, sample: TestSetSample) -> FaceImage:
        return load_png(self.root / sample.face_path)

    def load_mask(self, sample: TestSetSample) -> RegionMask:
        return load_mask_png(self.root / sample.mask_path)


def _sample_to_json(s: TestSetSample) -> dict:
    return {
        "sample_id": s.sample_id,
        "face_id": s.face_id,
        "face_path": s.face_path,
        "attribute_count": s.attribute_count,
        "instruction": s.instruction_text,
        "edits": [{"kind": e.kind.value, "change": e.change} for e in s.edits],
        "target_caption": s.target_caption,
        "mask_path": s.mask_path,
    }


def _sample_from_json(data: dict) -> TestSetSample:
    return TestSetSample(
        sample_id=data["sample_id"],
        face_id=data["face_id"],
        face_path=data["face_path"],
        attribute_count=data["attribute_count"],
        instruction_text=data["instruction"],
        edits=tuple(
            AttributeEdit(AttributeKind(e["kind"]), e["change"])
            for e in data["edits"]
        ),
        target_caption=data["target_caption"],
        mask_path=data["mask_path"],
    )


def _testset_hash(spec_json: dict, samples_json: list[dict]) -> str:
    payload = json.dumps(
        {"spec": spec_json, "samples": samples_json}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def build_testset(spec: TestSetSpec, backends, out_dir: str | Path) -> TestSet:
    """Filter the corpus by quality, pick faces with the seed, and
    attach one compound instruction per requested attribute count.

    With the mock stack, change tokens are chosen to actually change
    the face's current state, and target captions come straight from
    the ground-truth target states; other stacks get seeded vocabulary
    choices and completer-rewritten captions.
    """
    corpus = read_corpus(spec.corpus)  # sorted by face_id
    is_mock = isinstance(backends, MockBackendSuite)

    mask_cache: dict[Path, dict] = {}

    def masks_for(face: CorpusFace) -> dict[AttributeKind, RegionMask]:
        ann = face.annotation_dir
        if ann not in mask_cache:
            mask_cache[ann] = ingest_masks(ann)
        return mask_cache[ann].get(face.face_id, {})

    passing: list[tuple[CorpusFace, FaceImage]] = []
    for entry in corpus:
        img = load_png(entry.image_path)
        if quality(img, backends) >= spec.quality_floor:
            passing.append((entry, img))
    if len(passing) < spec.n_faces:
        raise InsufficientFaces(
            f"need {spec.n_faces} faces above quality {spec.quality_floor}, "
            f"only {len(passing)} of {len(corpus)} qualify"
        )
    chooser = random.Random(f"{spec.seed}:testset:selection")
    chosen = chooser.sample(passing, spec.n_faces)
    chosen.sort(key=lambda pair: pair[0].face_id)

    root = Path(out_dir)
    (root / "faces").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    samples: list[TestSetSample] = []
    for entry, img in chosen:
        kind_masks = masks_for(entry)
        save_png(img, root / "faces" / f"{entry.face_id}.png")
        states = decode_face(img) if is_mock else None
        for count in spec.attribute_counts:
            available = [k for k in ALL_KINDS if k in kind_masks]
            if len(available) < count:
                logger.warning(
                    "face %s has masks for %d kinds, skipping n=%d",
                    entry.face_id,
                    len(available),
                    count,
                )
                continue
            rng = random.Random(
                f"{spec.seed}:testset:{entry.face_id}:{count}"
            )
            kinds = rng.sample(available, count)
            edits = []
            for kind in kinds:
                tokens = list(vocabulary_for(kind))
                if states is not None:
                    tokens = [t for t in tokens if t != states[kind]] or tokens
                edits.append(AttributeEdit(kind, rng.choice(tokens)))
            instr = compose_multi(
                edits, phrasing_seed=f"{spec.seed}:{entry.face_id}:{count}"
            )
            if states is not None:
                target_states = {**states}
                for e in edits:
                    target_states[e.kind] = e.change
                caption = MockBackendSuite.caption_for_states(target_states)
            else:
                caption = target_caption(
                    backends.caption(img), instr, backends
                )
            union = union_masks([kind_masks[k] for k in kinds])
            sample_id = f"{entry.face_id}:n{count}"
            save_mask_png(union, root / "masks" / f"{sample_id}.png")
            samples.append(
                TestSetSample(
                    sample_id=sample_id,
                    face_id=entry.face_id,
                    face_path=f"faces/{entry.face_id}.png",
                    attribute_count=count,
                    instruction_text=instr.text,
                    edits=tuple(edits),
                    target_caption=caption,
                    mask_path=f"masks/{sample_id}.png",
                )
            )

    spec_json = {
        "n_faces": spec.n_faces,
        "quality_floor": spec.quality_floor,
        "attribute_counts": list(spec.attribute_counts),
        "seed": spec.seed,
    }
    samples_json = [_sample_to_json(s) for s in samples]
    digest = _testset_hash(spec_json, samples_json)
    (root / TESTSET_FILE).write_text(
        json.dumps(
            {"spec": spec_json, "testset_hash": digest, "samples": samples_json},
            indent=2,
            sort_keys=True,
        )
    )
    return TestSet(root=root, spec=spec_json, testset_hash=digest, samples=samples)


def load_testset(path: str | Path) -> TestSet:
    root = Path(path)
    data = json.loads((root / TESTSET_FILE).read_text())
    return TestSet(
        root=root,
        spec=data["spec"],
        testset_hash=data["testset_hash"],
        samples=[_sample_from_json(s) for s in data["samples"]],
    )


# --- experiments ------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    model_tag: str
    decomposition: str = "rule_based"  # none | llm | rule_based
    sr_enabled: bool = True
    backends: object = "mock"  # "mock" or {capability: {"base_url": ...}}
    worker_count: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.model_tag:
            raise ValueError("model_tag must be non-empty")
        if self.decomposition not in DECOMPOSITION_MODES:
            raise ValueError(
                f"decomposition must be one of {DECOMPOSITION_MODES}"
            )
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")


def config_to_json(config: ExperimentConfig) -> dict:
    return {
        "model_tag": config.model_tag,
        "decomposition": config.decomposition,
        "sr_enabled": config.sr_enabled,
        "backends": config.backends,
        "worker_count": config.worker_count,
        "seed": config.seed,
    }


def config_from_json(data: dict) -> ExperimentConfig:
    return ExperimentConfig(
        model_tag=data["model_tag"],
        decomposition=data.get("decomposition", "rule_based"),
        sr_enabled=data.get("sr_enabled", True),
        backends=data.get("backends", "mock"),
        worker_count=data.get("worker_count", 4),
        seed=data.get("seed", 0),
    )


@dataclass
class ExperimentResult:
    evaluations: list[SampleEvaluation]
    errors: list[dict]
    config: ExperimentConfig
    testset_hash: str


def _execute_sample(
    config: ExperimentConfig, testset: TestSet, sample: TestSetSample, backends
) -> EditTrace:
    face = testset.load_face(sample)
    instr = sample.instruction()
    if config.decomposition == "none":
        return run_single_shot(face, instr, backends)
    try:
        if config.decomposition == "rule_based":
            chain = decompose_rule_based(instr)
        else:
            chain = decompose_llm(instr, backends).chain
    except (DecompositionFailed, UnsplittableInstruction) as exc:
        # nothing executable: run the empty chain so every required
        # attribute scores as neglected rather than dropping the sample
        logger.warning("sample %s: decomposition failed: %s", sample.sample_id, exc)
        chain = InstructionChain(steps=(), provenance="manual")
    return run_chain(
        face, chain, backends, sr=backends if config.sr_enabled else None
    )


def run_experiment(
    config: ExperimentConfig,
    testset: TestSet,
    backends,
    out_dir: str | Path | None = None,
) -> ExperimentResult:
    """Evaluate every test-set sample under one configuration.

    Samples fail independently: a backend error on one sample is
    recorded and the run continues. Results are ordered by sample_id
    regardless of worker scheduling.
    """

    def evaluate(sample: TestSetSample):
        trace = _execute_sample(config, testset, sample, backends)
        face = trace.image(trace.input_ref)
        final = trace.final_image
        return SampleEvaluation(
            sample_id=sample.sample_id,
            model_tag=config.model_tag,
            clip_sim=clip_sim(final, sample.target_caption, backends),
            judgements=judge_required_edits(trace, sample.edits, backends),
            preserve_l1=preserve_l1(face, final, [testset.load_mask(sample)]),
            quality=quality(final, backends),
            target_caption=sample.target_caption,
        )

    evaluations: list[SampleEvaluation] = []
    errors: list[dict] = []

    def guarded(sample: TestSetSample):
        try:
            return sample.sample_id, evaluate(sample), None
        except EditChainError as exc:
            return sample.sample_id, None, f"{type(exc).__name__}: {exc}"

    if config.worker_count == 1:
        outcomes = [guarded(s) for s in testset.samples]
    else:
        with ThreadPoolExecutor(max_workers=config.worker_count) as pool:
            outcomes = list(pool.map(guarded, testset.samples))
    for sample_id, ev, error in sorted(outcomes, key=lambda o: o[0]):
        if error is None:
            evaluations.append(ev)
        else:
            logger.warning("sample %s failed: %s", sample_id, error)
            errors.append({"sample_id": sample_id, "error": error})

    result = ExperimentResult(
        evaluations=evaluations,
        errors=errors,
        config=config,
        testset_hash=testset.testset_hash,
    )
    if out_dir is not None:
        write_results(result, out_dir)
    return result


def write_results(result: ExperimentResult, out_dir: str | Path) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_evaluations(root / RESULTS_FILE, result.evaluations)
    meta = {
        "config": config_to_json(result.config),
        "model_tag": result.config.model_tag,
        "testset_hash": result.testset_hash,
        "n_evaluations": len(result.evaluations),
        "errors": result.errors,
    }
    (root / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


def read_results(path: str | Path) -> tuple[dict, list[SampleEvaluation]]:
    root = Path(path)
    meta = json.loads((root / META_FILE).read_text())
    return meta, read_evaluations(root / RESULTS_FILE)
