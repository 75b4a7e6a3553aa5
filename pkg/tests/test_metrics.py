import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textrich.errors import AlignmentError, MetricError
from textrich.evaluate import evaluate_records, evaluate_run, metric_value, read_jsonl
from textrich.metrics import (DataTable, SpottingMatchMode, anls, best_total, best_total_exhaustive, levenshtein,
                              one_minus_ned, parse_table, prf, relaxed_accuracy, rms_f1,
                              similarity_matrix, spotting_counts, spotting_prf)
from textrich.dataset import sample_record
from textrich.synth.generators import generate_dataset

from oracles import box, brute_levenshtein, brute_multiset, brute_point_counts, random_boxes

TRANS = SpottingMatchMode.TRANSCRIPTION
POINT = SpottingMatchMode.POINT


class TestPRF:
    def test_formula(self):
        assert prf(1, 1, 2) == pytest.approx((1.0, 0.5, 2 / 3))

    def test_degenerate(self):
        assert prf(0, 0, 0) == (1.0, 1.0, 1.0)
        assert prf(0, 0, 3) == (0.0, 0.0, 0.0)
        assert prf(0, 2, 0) == (0.0, 0.0, 0.0)


class TestStringMetrics:
    def test_levenshtein_examples(self):
        assert levenshtein("", "abc") == 3
        assert levenshtein("hello", "hallo") == 1
        assert levenshtein("kitten", "sitting") == 3

    @given(st.text(max_size=8), st.text(max_size=8))
    @settings(max_examples=200)
    def test_levenshtein_oracle_and_symmetry(self, a, b):
        assert levenshtein(a, b) == brute_levenshtein(a, b) == levenshtein(b, a)

    def test_one_minus_ned(self):
        assert one_minus_ned("abc", "abc") == 1.0
        assert one_minus_ned("abc", "abd") == pytest.approx(1 - 1 / 3)
        assert one_minus_ned("", "abc") == 0.0
        assert one_minus_ned("", "") == 1.0

    def test_anls_fixtures(self):
        assert anls([("hello", ["hello"])]) == 1.0
        assert anls([("hallo", ["hello"])]) == pytest.approx(0.8)
        assert anls([("xyz", ["hello"])]) == 0.0
        assert anls([("hallo", ["hello"]), ("xyz", "hello")]) == pytest.approx(0.4)

    def test_anls_normalises_case_and_space(self):
        assert anls([("  Hello World ", ["hello   world"])]) == 1.0

    def test_anls_best_of_answers(self):
        assert anls([("cat", ["dog", "cat"])]) == 1.0

    def test_anls_errors(self):
        with pytest.raises(MetricError):
            anls([])
        with pytest.raises(MetricError):
            anls([("a", [])])

    @pytest.mark.parametrize("pred,gt,want", [("104", "100", 1), ("106", "100", 0), ("Paris", "paris", 1),
                                              ("0", "0", 1), ("0.1", "0", 0), ("1,000", "1000", 1),
                                              ("50%", "49", 1), ("abc", "abd", 0)])
    def test_relaxed_accuracy(self, pred, gt, want):
        assert relaxed_accuracy(pred, gt) == want

    @given(st.text(max_size=10), st.text(max_size=10))
    def test_bounded(self, a, b):
        assert 0.0 <= one_minus_ned(a, b) <= 1.0
        assert 0.0 <= anls([(a, b)]) <= 1.0


class TestSpotting:
    def test_identical(self):
        xs = [box(0, 0, "ab"), box(10, 0, "cd")]
        for mode in (TRANS, POINT):
            r = spotting_prf(xs, xs, mode)
            assert (r.precision, r.recall, r.value) == (1.0, 1.0, 1.0)

    def test_one_of_two(self):
        r = spotting_prf([box(0, 0, "ab")], [box(0, 0, "ab"), box(10, 0, "cd")])
        assert (r.precision, r.recall) == (1.0, 0.5)
        assert r.value == pytest.approx(2 / 3)

    def test_centre_outside_box(self):
        pred, gt = [box(30, 30, "ab")], [box(0, 0, "ab")]
        assert spotting_prf(pred, gt, TRANS).value == 1.0
        c = spotting_counts(pred, gt, POINT)
        assert c["matched"] == 0 and c["pos"] == 0
        assert c == {**brute_point_counts(pred, gt), "pred": 1, "gt": 1}

    def test_position_only_match(self):
        c = spotting_counts([box(0, 0, "zz")], [box(0, 0, "ab")], POINT)
        assert c["pos"] == 1 and c["matched"] == 0

    def test_tie_prefers_matching_text(self):
        gts = [box(0, 0, "ab", w=10, h=10), box(0, 0, "cd", w=10, h=10)]
        preds = [box(0, 0, "cd", w=10, h=10), box(0, 0, "ab", w=10, h=10)]
        assert spotting_counts(preds, gts, POINT)["matched"] == 2

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(300):
            preds = random_boxes(rng, int(rng.integers(0, 5)))
            gts = random_boxes(rng, int(rng.integers(0, 5)))
            c = spotting_counts(preds, gts, POINT)
            oracle = brute_point_counts(preds, gts)
            assert (c["pos"], c["matched"]) == (oracle["pos"], oracle["matched"])
            assert spotting_counts(preds, gts, TRANS)["matched"] == brute_multiset(preds, gts)

    def test_symmetry_transcription_mode(self, rng):
        for _ in range(50):
            a, b = random_boxes(rng, int(rng.integers(1, 5))), random_boxes(rng, int(rng.integers(1, 5)))
            ab, ba = spotting_prf(a, b), spotting_prf(b, a)
            assert ab.precision == ba.recall and ab.recall == ba.precision and ab.value == ba.value

    def test_f1_bounded_by_twice_min(self, rng):
        for _ in range(50):
            r = spotting_prf(random_boxes(rng, 4), random_boxes(rng, 3), POINT)
            assert 0 <= r.value <= 2 * min(r.precision, r.recall) + 1e-12


def table(rows, columns=("value",)):
    return DataTable(list(columns), [(h, list(cells)) for h, cells in rows])


class TestTables:
    def test_parse_formats_agree(self):
        csv_t = parse_table("category,value\nA,3\nB,6", "csv")
        md_t = parse_table("| category | value |\n| --- | --- |\n| A | 3 |\n| B | 6 |", "markdown")
        js_t = parse_table(json.dumps([{"category": "A", "value": 3}, {"category": "B", "value": 6}]), "json")
        assert csv_t == md_t == js_t
        assert csv_t.entries() == [("A value", "3"), ("B value", "6")]

    @pytest.mark.parametrize("text,fmt", [("a", "csv"), ("{}", "json"), ("[1]", "json"), ("nope", "json"),
                                          ("x,y", "xml")])
    def test_parse_errors(self, text, fmt):
        with pytest.raises(MetricError):
            parse_table(text, fmt)

    def test_ragged_row(self):
        with pytest.raises(MetricError):
            DataTable(["a", "b"], [("r", ["1"])])


class TestRMS:
    def test_identical(self):
        t = table([("A", ["3"]), ("B", ["6"])])
        assert rms_f1(t, t).value == 1.0

    def test_doubled_value(self):
        gt = table([("A", ["1"]), ("B", ["2"])])
        pred = table([("A", ["1"]), ("B", ["4"])])
        assert rms_f1(pred, gt).value == pytest.approx(0.5)

    def test_row_swap_invariant(self):
        gt = table([("A", ["1"]), ("B", ["2"]), ("C", ["5"])])
        pred = table([("C", ["5"]), ("A", ["1.5"]), ("B", ["2"])])
        swapped = table([("B", ["2"]), ("C", ["5"]), ("A", ["1.5"])])
        assert rms_f1(pred, gt).value == pytest.approx(rms_f1(swapped, gt).value)

    def test_extra_rows_lower_precision(self):
        gt = table([("A", ["1"])])
        pred = table([("A", ["1"]), ("B", ["2"])])
        r = rms_f1(pred, gt)
        assert r.recall == 1.0 and r.precision < 1.0

    def test_empty(self):
        with pytest.raises(MetricError):
            rms_f1(DataTable(["v"], []), table([("A", ["1"])]))

    def test_assignment_matches_exhaustive(self, rng):
        for _ in range(200):
            sim = rng.random(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5))))
            assert best_total(sim, exhaustive_limit=0) == pytest.approx(best_total_exhaustive(sim))

    def test_similarity_fixture(self):
        sim = similarity_matrix([("A value", "1")], [("A value", "2"), ("B value", "1")])
        np.testing.assert_allclose(sim, [[0.5, 1 - 1 / 7]])


def gt_records(samples):
    return [sample_record(s, None, 1000) for s in samples]


@pytest.fixture(scope="module")
def gts():
    counts = {t: 3 for t in ("spotting", "doc_parse", "chart_parse", "kie", "doc_vqa", "table_qa",
                             "translation", "pure_text")}
    return gt_records(generate_dataset(counts, seed=3))


class TestEvaluate:
    def test_self_evaluation_is_perfect(self, gts):
        preds = [{"id": r["id"], "task": r["task"], "output": r["target"]} for r in gts]
        report = evaluate_records(preds, gts)
        assert report["records"] == len(gts)
        assert report["metrics"]
        for m in report["metrics"]:
            assert m["value"] == 1.0, m

    def test_empty_predictions(self, gts):
        report = evaluate_records([], gts, task="spotting")
        assert metric_value(report, "spotting_f1") == 0.0
        assert report["missing_predictions"] == 3

    def test_unknown_prediction_id(self, gts):
        with pytest.raises(AlignmentError):
            evaluate_records([{"id": "nope", "output": ""}], gts)

    def test_duplicate_ids(self, gts):
        with pytest.raises(AlignmentError):
            evaluate_records([], gts + gts[:1])

    def test_malformed_stream_diagnostics(self, gts):
        spot = [r for r in gts if r["task"] == "spotting"]
        preds = [{"id": r["id"], "output": r["target"][:-7]} for r in spot]
        report = evaluate_records(preds, spot)
        assert sum(report["diagnostics"].values()) >= 1
        assert 0.0 < metric_value(report, "spotting_f1") < 1.0

    def test_unknown_task(self, gts):
        with pytest.raises(MetricError):
            evaluate_records([], gts, task="ocr")

    def test_files_and_skips(self, gts, tmp_path):
        gt_path, pred_path = tmp_path / "gt.jsonl", tmp_path / "pred.jsonl"
        gt_path.write_text("\n".join(json.dumps(r) for r in gts) + "\n")
        lines = [json.dumps({"id": r["id"], "output": r["target"]}) for r in gts[:4]] + ["{broken", "[1]"]
        pred_path.write_text("\n".join(lines) + "\n")
        report = evaluate_run(pred_path, gt_path)
        assert report["skipped"]["pred"] == 2
        assert report == evaluate_run(pred_path, gt_path)
        records, skipped = read_jsonl(pred_path)
        assert (len(records), skipped) == (4, 2)
