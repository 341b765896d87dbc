"""Command line interface.

Every command runs against the in-process mock stack by default; pass
a config document to point capabilities at HTTP services instead. Auth
tokens never appear in config files: an endpoint names the environment
variable that holds its token.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .backends.client import BackendEndpoint, HttpBackendSuite
from .backends.mock import MockBackendSuite
from .backends.server import serve
from .dataset import BuildConfig, build_dataset, parse_edit_plan
from .decomposer import decompose_llm, decompose_rule_based, load_prompt_template
from .errors import EditChainError
from .executor import run_chain, run_single_shot, save_trace
from .harness import (
    TestSetSpec,
    build_testset,
    config_from_json,
    load_testset,
    make_corpus,
    run_experiment,
)
from .imaging import load_png
from .instructions import AttributeEdit, MultiAttributeInstruction, detect_state_pairs
from .report import render_report

logger = logging.getLogger(__name__)


def instruction_from_text(text: str) -> MultiAttributeInstruction:
    """Read the requested edits out of a raw sentence, first token per
    attribute."""
    edits = []
    seen = set()
    for kind, token in detect_state_pairs(text):
        if kind not in seen:
            seen.add(kind)
            edits.append(AttributeEdit(kind, token))
    return MultiAttributeInstruction(text, tuple(edits))


def _suite_from_backends(backends):
    if backends in (None, "mock"):
        return MockBackendSuite()
    endpoints = {
        name: BackendEndpoint(**spec) for name, spec in backends.items()
    }
    return HttpBackendSuite(endpoints=endpoints)


def _suite_from_args(args):
    config_path = getattr(args, "config", None)
    if config_path is None:
        return MockBackendSuite()
    doc = json.loads(Path(config_path).read_text())
    return _suite_from_backends(doc.get("backends", doc))


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


def cmd_decompose(args) -> int:
    instr = instruction_from_text(args.instruction)
    if args.rule_based:
        chain = decompose_rule_based(instr)
    else:
        completer = (
            HttpBackendSuite.for_base_url(args.endpoint)
            if args.endpoint
            else MockBackendSuite()
        )
        template = (
            load_prompt_template(args.template) if args.template else None
        )
        chain = decompose_llm(instr, completer, template=template).chain
    for i, step in enumerate(chain.steps, 1):
        print(f"{i}. {step.text}")
    return 0


def cmd_edit(args) -> int:
    suite = _suite_from_args(args)
    image = load_png(args.image)
    instr = instruction_from_text(args.instruction)
    if args.single_shot:
        trace = run_single_shot(image, instr, suite)
    else:
        chain = decompose_llm(instr, suite).chain
        trace = run_chain(
            image, chain, suite, sr=None if args.no_sr else suite
        )
    save_trace(trace, args.out)
    for step in trace.steps:
        print(f"step {step.index}: {step.instruction.text} [{step.status}]")
    final = Path(args.out) / f"{trace.final_ref}.png"
    print(f"final image: {final}")
    if not trace.ok:
        print(f"error: {trace.error}", file=sys.stderr)
        return 1
    return 0


def cmd_build_testset(args) -> int:
    spec = TestSetSpec(
        corpus=args.corpus,
        n_faces=args.n,
        quality_floor=args.quality_floor,
        attribute_counts=_int_list(args.counts),
        seed=args.seed,
    )
    testset = build_testset(spec, _suite_from_args(args), args.out)
    print(
        f"wrote {len(testset.samples)} samples "
        f"({spec.n_faces} faces x counts {list(spec.attribute_counts)}) "
        f"to {args.out}; hash {testset.testset_hash[:12]}"
    )
    return 0


def cmd_build_dataset(args) -> int:
    plan = parse_edit_plan(json.loads(Path(args.plan).read_text()))
    config = BuildConfig(
        output_root=args.out,
        tau_clip=args.tau_clip,
        tau_q=args.tau_q,
        seed=args.seed,
        workers=args.workers,
    )
    manifest = build_dataset(args.corpus, plan, config, _suite_from_args(args))
    print(
        f"accepted {len(manifest.entries)} triplets; "
        f"manifest {Path(args.out) / 'manifest.jsonl'}"
    )
    return 0


def cmd_run_experiment(args) -> int:
    config = config_from_json(json.loads(Path(args.config).read_text()))
    suite = _suite_from_backends(config.backends)
    testset = load_testset(args.testset)
    result = run_experiment(config, testset, suite, out_dir=args.out)
    print(
        f"[{config.model_tag}] evaluated {len(result.evaluations)} samples, "
        f"{len(result.errors)} failed; results in {args.out}"
    )
    return 0


def cmd_report(args) -> int:
    written = render_report(
        args.results,
        baseline_tag=args.baseline,
        fmt=args.format,
        out_dir=args.out,
    )
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_make_corpus(args) -> int:
    manifest = make_corpus(
        args.out,
        n_faces=args.n,
        seed=args.seed,
        width_choices=_int_list(args.widths),
    )
    print(f"wrote {args.n} faces; manifest {manifest}")
    return 0


def cmd_mock_serve(args) -> int:
    print(f"serving mock backends on http://{args.host}:{args.port}/v1/*")
    serve(port=args.port, host=args.host)
    return 0


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument(
        "--mock",
        action="store_true",
        help="use the in-process mock backends (default)",
    )
    group.add_argument(
        "--config",
        metavar="PATH",
        help="JSON document with a 'backends' endpoint map",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="editchain",
        description="Chain-of-instruction face editing toolkit.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "decompose", help="split a compound instruction into a chain"
    )
    p.add_argument("--instruction", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument(
        "--rule-based", action="store_true", help="split without an LLM"
    )
    group.add_argument(
        "--endpoint", metavar="URL", help="text-completion service base URL"
    )
    p.add_argument("--template", metavar="PATH", help="prompt template JSON")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("edit", help="run an instruction chain on an image")
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--out", required=True, help="trace output directory")
    p.add_argument(
        "--no-sr", action="store_true", help="skip upscaling between steps"
    )
    p.add_argument(
        "--single-shot",
        action="store_true",
        help="one edit call with the whole sentence (baseline mode)",
    )
    _add_backend_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("build-testset", help="freeze an evaluation test set")
    p.add_argument("--corpus", required=True, help="corpus manifest JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200, help="faces to include")
    p.add_argument("--quality-floor", type=float, default=0.7)
    p.add_argument("--counts", default="2,3,4", help="attribute counts")
    p.add_argument("--seed", type=int, default=0)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_build_testset)

    p = sub.add_parser(
        "build-dataset", help="build a filtered editing-triplet dataset"
    )
    p.add_argument("--corpus", required=True, help="corpus manifest JSONL")
    p.add_argument("--plan", required=True, help="edit plan JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--tau-clip", type=float, default=0.25)
    p.add_argument("--tau-q", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser(
        "run-experiment", help="evaluate a configuration on a test set"
    )
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--testset", required=True, help="test set directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("report", help="compare experiment runs")
    p.add_argument(
        "--results", nargs="+", required=True, metavar="DIR",
        help="result directories",
    )
    p.add_argument("--baseline", metavar="TAG", help="run to take deltas against")
    p.add_argument("--format", choices=("md", "csv", "both"), default="md")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-corpus", help="write a synthetic face corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--widths", default="512", help="face widths to draw from")
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("mock-serve", help="serve the mock backends over HTTP")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_mock_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (EditChainError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
