"""Report rendering over synthetic experiment results."""

import pytest

from editchain.errors import EmptyInput, MixedTestsets, UnknownBaseline
from editchain.harness import ExperimentConfig, ExperimentResult, write_results
from editchain.metrics import SampleEvaluation, aggregate
from editchain.report import (
    load_runs,
    render_csv,
    render_markdown,
    render_report,
)

HASH_A = "a" * 64
HASH_B = "b" * 64


def sample(sample_id, tag, count, clip, correct):
    judgements = tuple(i < correct for i in range(count))
    return SampleEvaluation(
        sample_id=sample_id,
        model_tag=tag,
        clip_sim=clip,
        judgements=judgements,
        preserve_l1=2.0,
        quality=0.9,
        target_caption="a face with red hair",
    )


BASE_EVALS = [
    sample("s01:n2", "base", 2, 0.535, 1),
    sample("s02:n2", "base", 2, 0.535, 1),
    sample("s01:n3", "base", 3, 0.5, 1),
]
TREAT_EVALS = [
    sample("s01:n2", "treat", 2, 0.770, 2),
    sample("s02:n2", "treat", 2, 0.770, 2),
    sample("s01:n3", "treat", 3, 1.0, 3),
    sample("s01:n4", "treat", 4, 0.9, 4),
]


def write_run(path, tag, evals, testset_hash=HASH_A):
    result = ExperimentResult(
        evaluations=evals,
        errors=[],
        config=ExperimentConfig(model_tag=tag, worker_count=1),
        testset_hash=testset_hash,
    )
    write_results(result, path)
    return path


@pytest.fixture()
def run_dirs(tmp_path):
    return [
        write_run(tmp_path / "base", "base", BASE_EVALS),
        write_run(tmp_path / "treat", "treat", TREAT_EVALS),
    ]


class TestLoadRuns:
    def test_merges_in_directory_order(self, run_dirs):
        evaluations, tags, digest = load_runs(run_dirs)
        assert tags == ["base", "treat"]
        assert digest == HASH_A
        assert len(evaluations) == len(BASE_EVALS) + len(TREAT_EVALS)

    def test_duplicate_tags_collapse(self, run_dirs, tmp_path):
        extra = write_run(tmp_path / "treat2", "treat", TREAT_EVALS)
        _, tags, _ = load_runs(run_dirs + [extra])
        assert tags == ["base", "treat"]

    def test_rejects_mixed_testsets(self, run_dirs, tmp_path):
        other = write_run(
            tmp_path / "other", "other", TREAT_EVALS, testset_hash=HASH_B
        )
        with pytest.raises(MixedTestsets) as exc:
            load_runs(run_dirs + [other])
        assert HASH_A[:12] in str(exc.value)
        assert HASH_B[:12] in str(exc.value)

    def test_rejects_empty_input(self):
        with pytest.raises(EmptyInput):
            load_runs([])


class TestRenderMarkdown:
    @pytest.fixture()
    def text(self):
        report = aggregate(BASE_EVALS + TREAT_EVALS, baseline_tag="base")
        return render_markdown(report, ["base", "treat"], HASH_A)

    def test_one_table_per_metric_family(self, text):
        for heading in (
            "## Caption similarity (mean)",
            "## Attribute coverage (pooled)",
            "## Untouched-region L1 (mean)",
            "## Quality score (mean)",
            "## Samples per group",
        ):
            assert heading in text

    def test_baseline_row_is_plain_and_first(self, text):
        table = text.split("## Caption similarity (mean)")[1]
        rows = [
            l
            for l in table.splitlines()
            if l.startswith("| ") and "---" not in l
        ][1:]
        assert rows[0].startswith("| base |")
        assert "(" not in rows[0]

    def test_delta_cell_format(self, text):
        assert "| 0.770 (+43.93%) |" in text

    def test_count_without_baseline_has_no_delta(self, text):
        table = text.split("## Caption similarity (mean)")[1]
        treat_row = next(
            l for l in table.splitlines() if l.startswith("| treat")
        )
        assert treat_row.endswith("| 0.900 |")

    def test_missing_group_renders_dash(self, text):
        table = text.split("## Caption similarity (mean)")[1]
        base_row = next(l for l in table.splitlines() if l.startswith("| base"))
        assert base_row.endswith("| - |")

    def test_coverage_delta(self, text):
        table = text.split("## Attribute coverage (pooled)")[1]
        treat_row = next(
            l for l in table.splitlines() if l.startswith("| treat")
        )
        assert "1.000 (+100.00%)" in treat_row

    def test_mentions_testset_hash(self, text):
        assert HASH_A[:12] in text


class TestRenderCsv:
    @pytest.fixture()
    def text(self):
        report = aggregate(BASE_EVALS + TREAT_EVALS, baseline_tag="base")
        return render_csv(report, ["base", "treat"])

    def test_header(self, text):
        assert text.splitlines()[0] == (
            "metric,model_tag,attribute_count,value,delta,n_samples"
        )

    def test_value_and_delta_columns(self, text):
        assert "clip_sim_mean,treat,2,0.770000,+43.93%,2" in text.splitlines()

    def test_baseline_rows_have_empty_delta(self, text):
        assert "clip_sim_mean,base,2,0.535000,,2" in text.splitlines()

    def test_unmatched_count_has_empty_delta(self, text):
        assert "clip_sim_mean,treat,4,0.900000,,1" in text.splitlines()

    def test_no_rows_for_absent_groups(self, text):
        assert not any(
            line.startswith("clip_sim_mean,base,4") for line in text.splitlines()
        )


class TestRenderReport:
    def test_writes_both_formats(self, run_dirs, tmp_path):
        written = render_report(
            run_dirs, baseline_tag="base", fmt="both", out_dir=tmp_path / "r"
        )
        assert [p.name for p in written] == ["report.md", "report.csv"]
        assert all(p.is_file() for p in written)

    def test_md_only(self, run_dirs, tmp_path):
        written = render_report(run_dirs, fmt="md", out_dir=tmp_path / "r")
        assert [p.name for p in written] == ["report.md"]
        # no baseline requested: no delta parentheses anywhere
        assert "(+" not in written[0].read_text().split("## Caption")[1]

    def test_rejects_unknown_format(self, run_dirs, tmp_path):
        with pytest.raises(ValueError):
            render_report(run_dirs, fmt="pdf", out_dir=tmp_path)

    def test_unknown_baseline_propagates(self, run_dirs, tmp_path):
        with pytest.raises(UnknownBaseline):
            render_report(
                run_dirs, baseline_tag="nope", fmt="md", out_dir=tmp_path
            )

    def test_deterministic_bytes(self, run_dirs, tmp_path):
        first = render_report(
            run_dirs, baseline_tag="base", fmt="both", out_dir=tmp_path / "a"
        )
        second = render_report(
            run_dirs, baseline_tag="base", fmt="both", out_dir=tmp_path / "b"
        )
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()
