"""Metric semantics: cosine similarity, pooled correctness, outside-region
preservation, quality validation, caption caching, aggregation deltas."""

from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from editchain.backends.mock import MockBackendSuite, band_mask, decode_face, render_face
from editchain.errors import (
    DimensionMismatch,
    EmptyInput,
    ProtocolError,
    UnknownBaseline,
)
from editchain.executor import run_chain, run_single_shot
from editchain.imaging import DiffValue, FaceImage, RegionMask, composite, resize
from editchain.instructions import (
    AttributeEdit,
    InstructionChain,
    compose_multi,
    render_instruction,
)
from editchain.metrics import (
    CaptionCache,
    MetricsReport,
    SampleEvaluation,
    SimValue,
    aggregate,
    build_rewrite_prompt,
    clip_sim,
    coverage,
    delta_percent,
    evaluation_from_json,
    evaluation_to_json,
    judge_required_edits,
    preserve_l1,
    quality,
    read_evaluations,
    render_delta,
    target_caption,
    write_evaluations,
)
from editchain.taxonomy import AttributeKind

from test_executor import BASE_STATES, FOUR_EDITS, FailingEditor, base_face, chain_of


def sample(judgements, clip=0.5, pres=1.0, qual=0.9, tag="m", sid="s"):
    return SampleEvaluation(
        sample_id=sid,
        model_tag=tag,
        clip_sim=clip,
        judgements=tuple(judgements),
        preserve_l1=pres,
        quality=qual,
        target_caption="a face",
    )


class TestClipSim:
    def test_image_vs_own_caption(self, mock_suite):
        img = base_face(512)
        value = clip_sim(img, mock_suite.caption(img), mock_suite)
        assert abs(value - 1.0) <= 1e-6
        assert not value.no_signal

    def test_disjoint_supports(self, mock_suite):
        img = base_face(512)
        assert clip_sim(img, "gray hair", mock_suite) == 0.0

    def test_six_of_nine_shared(self, mock_suite):
        img = base_face(512)
        other = render_face(
            {
                **BASE_STATES,
                AttributeKind.HAIR: "red",
                AttributeKind.EYES: "black",
                AttributeKind.BEARD: "add",
            },
            512,
            512,
        )
        value = clip_sim(img, mock_suite.caption(other), mock_suite)
        assert abs(value - 6 / 9) <= 1e-6

    def test_no_signal_flag(self, mock_suite):
        img = base_face(512)
        value = clip_sim(img, "nothing recognizable at all", mock_suite)
        assert value == 0.0
        assert value.no_signal

    class _RawEmbedder:
        """Unnormalized vectors: cosine must normalize them itself."""

        def embed(self, text=None, image=None):
            return np.array([3.0, 0.0]) if image is not None else np.array([7.0, 0.0])

    def test_normalizes_raw_vectors(self):
        value = clip_sim(base_face(16), "whatever", self._RawEmbedder())
        assert value == 1.0

    class _OppositeEmbedder:
        def embed(self, text=None, image=None):
            return np.array([1.0, 0.0]) if image is not None else np.array([-1.0, 0.0])

    def test_range_reaches_negative(self):
        value = clip_sim(base_face(16), "whatever", self._OppositeEmbedder())
        assert value == -1.0


class TestCoverage:
    def test_pooled_not_averaged(self):
        pair = [sample([True, True]), sample([False, False, False])]
        assert coverage(pair) == 0.4  # 2/5, not mean(1.0, 0.0)

    def test_direct_ratio(self):
        assert coverage([sample([True, True, False])]) == pytest.approx(2 / 3)

    def test_all_true(self):
        assert coverage([sample([True]), sample([True, True])]) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            coverage([])

    def test_order_invariant(self):
        group = [sample([True, False]), sample([True]), sample([False, False, True])]
        assert coverage(group) == coverage(list(reversed(group)))

    @given(
        st.lists(
            st.lists(st.booleans(), min_size=1, max_size=5), min_size=1, max_size=8
        ),
        st.lists(
            st.lists(st.booleans(), min_size=1, max_size=5), min_size=1, max_size=8
        ),
    )
    @settings(max_examples=60, deadline=None)
    def test_concatenation_consistency(self, a, b):
        sa = [sample(j) for j in a]
        sb = [sample(j) for j in b]
        pooled = coverage(sa + sb)
        na = sum(len(j) for j in a)
        nb = sum(len(j) for j in b)
        recombined = (coverage(sa) * na + coverage(sb) * nb) / (na + nb)
        assert pooled == pytest.approx(recombined, abs=1e-12)


def brute_outside_mean(a: FaceImage, b: FaceImage, exclude_bits) -> float:
    total = 0
    count = 0
    for y in range(a.height):
        for x in range(a.width):
            if exclude_bits is not None and exclude_bits[y][x]:
                continue
            for c in range(3):
                total += abs(int(a.pixels[y, x, c]) - int(b.pixels[y, x, c]))
                count += 1
    return total / count if count else 0.0


class TestPreserveL1:
    def test_identity_is_zero(self, mock_suite):
        img = base_face(64)
        mask = band_mask(64, 64, AttributeKind.HAIR)
        assert preserve_l1(img, img, [mask]) == 0.0

    def test_composite_confined_to_region_is_zero(self):
        rng = random.Random(7)
        for _ in range(20):
            h, w = rng.randint(9, 24), rng.randint(4, 24)
            base = FaceImage.from_array(
                np.array(
                    [[[rng.randrange(256)] * 3 for _ in range(w)] for _ in range(h)],
                    dtype=np.uint8,
                )
            )
            edited = FaceImage.from_array(
                np.array(
                    [[[rng.randrange(256)] * 3 for _ in range(w)] for _ in range(h)],
                    dtype=np.uint8,
                )
            )
            bits = np.array(
                [[rng.random() < 0.4 for _ in range(w)] for _ in range(h)]
            )
            mask = RegionMask.from_array(bits)
            assert preserve_l1(base, composite(base, edited, mask), [mask]) == 0.0

    def test_constant_shift_outside_only(self):
        base = FaceImage.from_array(np.full((16, 16, 3), 100, dtype=np.uint8))
        bits = np.zeros((16, 16), dtype=bool)
        bits[:8, :] = True
        mask = RegionMask.from_array(bits)
        shifted = np.full((16, 16, 3), 100, dtype=np.uint8)
        shifted[8:, :, :] += 20
        out = FaceImage.from_array(shifted)
        assert preserve_l1(base, out, [mask]) == 20.0

    def test_resizes_output_first(self, mock_suite):
        img = base_face(64)
        small = resize(img, 32, 32)
        mask = band_mask(64, 64, AttributeKind.SKIN)
        from editchain.imaging import masked_mean_abs_diff, union_masks

        expected = masked_mean_abs_diff(img, resize(small, 64, 64), union_masks([mask]))
        assert preserve_l1(img, small, [mask]) == expected

    def test_full_mask_flags_empty_region(self):
        img = base_face(16)
        full = RegionMask.full(16, 16)
        value = preserve_l1(img, base_face(32), [full])
        assert value == 0.0 and value.empty_region

    def test_no_masks_means_whole_image(self):
        a = FaceImage.from_array(np.full((9, 4, 3), 10, dtype=np.uint8))
        b = FaceImage.from_array(np.full((9, 4, 3), 13, dtype=np.uint8))
        assert preserve_l1(a, b, []) == 3.0

    def test_mask_dimension_mismatch(self):
        img = base_face(16)
        with pytest.raises(DimensionMismatch):
            preserve_l1(img, img, [RegionMask.full(8, 8)])

    def test_invariant_to_changes_inside_union(self):
        rng = random.Random(11)
        base = FaceImage.from_array(
            np.array(
                [[[rng.randrange(256)] * 3 for _ in range(12)] for _ in range(12)],
                dtype=np.uint8,
            )
        )
        bits = np.zeros((12, 12), dtype=bool)
        bits[3:9, 3:9] = True
        mask = RegionMask.from_array(bits)
        variant = base.pixels.copy()
        variant[4:8, 4:8, :] = 255
        out = FaceImage.from_array(variant)
        assert preserve_l1(base, out, [mask]) == 0.0

    def test_matches_brute_force_reference(self):
        rng = random.Random(13)
        for _ in range(5):
            arr_a = np.array(
                [
                    [[rng.randrange(256) for _ in range(3)] for _ in range(10)]
                    for _ in range(10)
                ],
                dtype=np.uint8,
            )
            arr_b = np.array(
                [
                    [[rng.randrange(256) for _ in range(3)] for _ in range(10)]
                    for _ in range(10)
                ],
                dtype=np.uint8,
            )
            bits = np.array(
                [[rng.random() < 0.3 for _ in range(10)] for _ in range(10)]
            )
            a = FaceImage.from_array(arr_a)
            b = FaceImage.from_array(arr_b)
            got = preserve_l1(a, b, [RegionMask.from_array(bits)])
            want = brute_outside_mean(a, b, bits)
            assert abs(got - want) <= 1e-9


class TestQuality:
    def test_mock_values(self, mock_suite):
        assert quality(base_face(512), mock_suite) == 1.0
        assert quality(base_face(256), mock_suite) == 0.5

    class _Scorer:
        def __init__(self, value):
            self.value = value

        def quality(self, img):
            return self.value

    def test_out_of_range_rejected(self):
        img = base_face(16)
        for bad in (1.3, -0.1, float("nan"), float("inf"), True, "high"):
            with pytest.raises(ProtocolError):
                quality(img, self._Scorer(bad))

    def test_integer_score_accepted(self):
        assert quality(base_face(16), self._Scorer(1)) == 1.0


class CountingCompleter:
    def __init__(self, reply="a man with red hair"):
        self.reply = reply
        self.calls = 0

    def complete(self, prompt, temperature=0.0, max_tokens=256):
        self.calls += 1
        return self.reply


class TestTargetCaption:
    def test_cache_prevents_second_call(self):
        completer = CountingCompleter()
        cache = CaptionCache()
        instr = compose_multi([AttributeEdit(AttributeKind.HAIR, "red")])
        first = target_caption("a face with black hair", instr, completer, cache)
        second = target_caption("a face with black hair", instr, completer, cache)
        assert first == second == "a man with red hair"
        assert completer.calls == 1
        assert cache.hits == 1 and cache.misses == 1

    def test_distinct_keys_call_again(self):
        completer = CountingCompleter()
        cache = CaptionCache()
        instr = compose_multi([AttributeEdit(AttributeKind.HAIR, "red")])
        target_caption("caption one", instr, completer, cache)
        target_caption("caption two", instr, completer, cache)
        assert completer.calls == 2

    def test_mock_completer_rewrites_states(self, mock_suite):
        img = base_face(512)
        instr = compose_multi(
            [
                AttributeEdit(AttributeKind.HAIR, "red"),
                AttributeEdit(AttributeKind.GLASSES, "add"),
            ]
        )
        rewritten = target_caption(mock_suite.caption(img), instr, mock_suite)
        expected = MockBackendSuite.caption_for_states(
            {
                **BASE_STATES,
                AttributeKind.HAIR: "red",
                AttributeKind.GLASSES: "add",
            }
        )
        assert rewritten == expected

    def test_prompt_carries_caption_and_instruction(self):
        prompt = build_rewrite_prompt("a face with black hair", "make the hair red")
        assert "Caption: a face with black hair" in prompt
        assert "Instruction: make the hair red" in prompt
        assert prompt.rstrip().endswith("Rewritten caption:")


class TestJudgeRequiredEdits:
    def test_chain_with_sr_all_correct(self, mock_suite):
        trace = run_chain(
            base_face(512), chain_of(FOUR_EDITS), mock_suite, sr=mock_suite
        )
        verdicts = judge_required_edits(trace, FOUR_EDITS, mock_suite)
        assert verdicts == (True, True, True, True)

    def test_chain_without_sr_last_step_gated(self, mock_suite):
        trace = run_chain(base_face(512), chain_of(FOUR_EDITS), mock_suite, sr=None)
        verdicts = judge_required_edits(trace, FOUR_EDITS, mock_suite)
        assert verdicts == (True, True, True, False)
        assert coverage([sample(verdicts)]) == 0.75

    def test_single_shot_first_only(self, mock_suite):
        instr = compose_multi(FOUR_EDITS[:3])
        trace = run_single_shot(base_face(512), instr, mock_suite)
        verdicts = judge_required_edits(trace, FOUR_EDITS[:3], mock_suite)
        assert verdicts == (True, False, False)

    def test_aborted_chain_counts_as_incorrect(self, mock_suite):
        editor = FailingEditor(fail_on_call=2, suite=mock_suite)
        trace = run_chain(base_face(512), chain_of(FOUR_EDITS), editor, sr=None)
        verdicts = judge_required_edits(trace, FOUR_EDITS, mock_suite)
        assert verdicts == (True, False, False, False)

    def test_unclaimed_kind_is_incorrect(self, mock_suite):
        trace = run_chain(
            base_face(512), chain_of(FOUR_EDITS[:2]), mock_suite, sr=mock_suite
        )
        extra = AttributeEdit(AttributeKind.GENDER, "male")
        verdicts = judge_required_edits(trace, list(FOUR_EDITS[:2]) + [extra], mock_suite)
        assert verdicts == (True, True, False)


class TestSampleEvaluation:
    def test_judgements_normalized(self):
        ev = sample([1, 0, True])
        assert ev.judgements == (True, False, True)
        assert ev.attribute_count == 3

    def test_empty_judgements_rejected(self):
        with pytest.raises(ValueError):
            sample([])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            sample([True], clip=float("nan"))

    def test_jsonl_round_trip_with_flags(self, tmp_path):
        evals = [
            SampleEvaluation(
                sample_id="a",
                model_tag="coie",
                clip_sim=SimValue(0.0, no_signal=True),
                judgements=(True, False),
                preserve_l1=DiffValue(0.0, empty_region=True),
                quality=0.75,
                target_caption="a face with red hair",
            ),
            sample([True], clip=0.25, pres=3.5, qual=1.0, sid="b"),
        ]
        path = tmp_path / "evals.jsonl"
        write_evaluations(path, evals)
        loaded = read_evaluations(path)
        assert loaded == evals
        assert loaded[0].clip_sim.no_signal
        assert loaded[0].preserve_l1.empty_region
        assert not getattr(loaded[1].clip_sim, "no_signal", False)

    def test_json_dict_shape(self):
        data = evaluation_to_json(sample([True, False], sid="x"))
        assert data["sample_id"] == "x"
        assert data["judgements"] == [True, False]
        assert evaluation_from_json(data) == sample([True, False], sid="x")


class TestDeltaRendering:
    def test_reference_pairs(self):
        assert render_delta(0.770, 0.535) == "+43.93%"
        assert render_delta(0.2535, 0.2291) == "+10.65%"

    def test_equal_is_zero(self):
        assert render_delta(0.5, 0.5) == "+0.00%"

    def test_negative_direction(self):
        assert render_delta(0.4, 0.5) == "-20.00%"

    def test_ties_round_away_from_zero(self):
        # 0.125% would truncate to 0.12% under bankers rounding
        assert render_delta(801.0, 800.0) == "+0.13%"

    def test_zero_base(self):
        assert render_delta(0.5, 0.0) == "n/a"

    @given(
        st.floats(min_value=0.01, max_value=10, allow_nan=False),
        st.floats(min_value=0.01, max_value=10, allow_nan=False),
    )
    @settings(max_examples=60, deadline=None)
    def test_sign_matches_direction(self, value, base):
        rendered = render_delta(value, base)
        if value > base * 1.0001:
            assert rendered.startswith("+")
        elif value < base * 0.9999:
            assert rendered.startswith("-")


class TestAggregate:
    def test_groups_and_means(self):
        evals = [
            sample([True, False], clip=0.2, pres=4.0, qual=0.8, tag="base", sid="a"),
            sample([False, False], clip=0.4, pres=6.0, qual=0.6, tag="base", sid="b"),
            sample([True, True], clip=0.6, pres=2.0, qual=1.0, tag="coie", sid="c"),
        ]
        report = aggregate(evals)
        base = report.groups[("base", 2)]
        assert base["n_samples"] == 2
        assert base["clip_sim_mean"] == pytest.approx(0.3)
        assert base["coverage"] == 0.25  # pooled 1/4
        assert base["preserve_l1_mean"] == pytest.approx(5.0)
        assert base["quality_mean"] == pytest.approx(0.7)
        assert report.groups[("coie", 2)]["coverage"] == 1.0
        assert report.deltas is None

    def test_deltas_vs_baseline(self):
        evals = [
            sample([True, False], tag="base", sid="a"),
            sample([True, True], tag="coie", sid="b"),
        ]
        report = aggregate(evals, baseline_tag="base")
        assert report.deltas[("coie", 2)]["coverage"] == "+100.00%"
        assert report.deltas[("base", 2)]["coverage"] == "+0.00%"

    def test_unknown_baseline(self):
        with pytest.raises(UnknownBaseline):
            aggregate([sample([True])], baseline_tag="missing")

    def test_baseline_absent_at_count_skips_delta(self):
        evals = [
            sample([True, False], tag="base", sid="a"),
            sample([True, True, True], tag="coie", sid="b"),
        ]
        report = aggregate(evals, baseline_tag="base")
        assert ("coie", 3) not in report.deltas
        assert ("base", 2) in report.deltas

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            aggregate([])

    def test_custom_grouping(self):
        evals = [
            sample([True], tag="base", sid="a"),
            sample([True, False], tag="base", sid="b"),
        ]
        report = aggregate(evals, grouping=lambda ev: (ev.model_tag, 0))
        assert report.groups[("base", 0)]["n_samples"] == 2
        assert report.groups[("base", 0)]["coverage"] == pytest.approx(2 / 3)
