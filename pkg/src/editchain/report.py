"""Cross-run reporting.

Reads one or more experiment result directories, verifies they were
produced from the same frozen test set, and renders one table per
metric family with relative deltas against a chosen baseline run.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .errors import EmptyInput, MixedTestsets
from .harness import read_results
from .metrics import METRIC_KEYS, MetricsReport, SampleEvaluation, aggregate

METRIC_LABELS = {
    "clip_sim_mean": "Caption similarity (mean)",
    "coverage": "Attribute coverage (pooled)",
    "preserve_l1_mean": "Untouched-region L1 (mean)",
    "quality_mean": "Quality score (mean)",
}

MISSING_CELL = "-"


def load_runs(
    results_dirs: Sequence[str | Path],
) -> tuple[list[SampleEvaluation], list[str], str]:
    """Load evaluations from every directory.

    Returns (evaluations, model tags in directory order, testset hash).
    Runs evaluated on different test sets cannot be compared, so a hash
    mismatch is an error.
    """
    if not results_dirs:
        raise EmptyInput("no results directories given")
    evaluations: list[SampleEvaluation] = []
    tags: list[str] = []
    reference_hash: str | None = None
    reference_dir: Path | None = None
    for directory in results_dirs:
        meta, evals = read_results(directory)
        if reference_hash is None:
            reference_hash = meta["testset_hash"]
            reference_dir = Path(directory)
        elif meta["testset_hash"] != reference_hash:
            raise MixedTestsets(
                f"{directory} was run on test set {meta['testset_hash'][:12]}, "
                f"but {reference_dir} used {reference_hash[:12]}"
            )
        if meta["model_tag"] not in tags:
            tags.append(meta["model_tag"])
        evaluations.extend(evals)
    return evaluations, tags, reference_hash or ""


def _ordered_tags(tags: Sequence[str], baseline_tag: str | None) -> list[str]:
    if baseline_tag is None or baseline_tag not in tags:
        return list(tags)
    return [baseline_tag] + [t for t in tags if t != baseline_tag]


def _counts(report: MetricsReport) -> list[int]:
    return sorted({count for _, count in report.groups})


def render_markdown(
    report: MetricsReport, tags: Sequence[str], testset_hash: str = ""
) -> str:
    """One pipe table per metric; rows are runs, columns attribute counts.

    Non-baseline cells carry the relative delta in parentheses; the
    baseline row is plain.
    """
    counts = _counts(report)
    lines = ["# Experiment report", ""]
    if testset_hash:
        lines += [f"Test set: `{testset_hash[:12]}`", ""]
    if report.baseline_tag is not None:
        lines += [
            f"Deltas are relative to `{report.baseline_tag}`.",
            "",
        ]
    ordered = _ordered_tags(tags, report.baseline_tag)
    for metric in METRIC_KEYS:
        lines.append(f"## {METRIC_LABELS[metric]}")
        lines.append("")
        header = ["run"] + [f"n={c}" for c in counts]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join([" --- "] * len(header)) + "|")
        for tag in ordered:
            cells = [tag]
            for count in counts:
                values = report.groups.get((tag, count))
                if values is None:
                    cells.append(MISSING_CELL)
                    continue
                cell = f"{values[metric]:.3f}"
                if (
                    report.deltas is not None
                    and tag != report.baseline_tag
                    and (tag, count) in report.deltas
                ):
                    cell += f" ({report.deltas[(tag, count)][metric]})"
                cells.append(cell)
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    lines.append("## Samples per group")
    lines.append("")
    header = ["run"] + [f"n={c}" for c in counts]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join([" --- "] * len(header)) + "|")
    for tag in ordered:
        cells = [tag] + [
            str(report.groups[(tag, c)]["n_samples"])
            if (tag, c) in report.groups
            else MISSING_CELL
            for c in counts
        ]
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


def render_csv(report: MetricsReport, tags: Sequence[str]) -> str:
    """Long-form rows: metric, run, attribute count, value, delta."""
    lines = ["metric,model_tag,attribute_count,value,delta,n_samples"]
    ordered = _ordered_tags(tags, report.baseline_tag)
    for metric in METRIC_KEYS:
        for tag in ordered:
            for count in _counts(report):
                values = report.groups.get((tag, count))
                if values is None:
                    continue
                delta = ""
                if (
                    report.deltas is not None
                    and tag != report.baseline_tag
                    and (tag, count) in report.deltas
                ):
                    delta = report.deltas[(tag, count)][metric]
                lines.append(
                    f"{metric},{tag},{count},{values[metric]:.6f},{delta},"
                    f"{values['n_samples']}"
                )
    return "\n".join(lines) + "\n"


def render_report(
    results_dirs: Sequence[str | Path],
    baseline_tag: str | None = None,
    fmt: str = "md",
    out_dir: str | Path = ".",
) -> list[Path]:
    """Load runs, aggregate, and write report.md and/or report.csv."""
    if fmt not in ("md", "csv", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    evaluations, tags, testset_hash = load_runs(results_dirs)
    report = aggregate(evaluations, baseline_tag=baseline_tag)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("md", "both"):
        path = out / "report.md"
        path.write_text(render_markdown(report, tags, testset_hash))
        written.append(path)
    if fmt in ("csv", "both"):
        path = out / "report.csv"
        path.write_text(render_csv(report, tags))
        written.append(path)
    return written
