"""Score prediction files against ground-truth datasets (JSONL)."""

from __future__ import annotations

import json
from collections import Counter, defaultdict

from textrich.codec import TASKS, TextInstance, Vocab, encode_escaped, parse_instances
from textrich.errors import AlignmentError, MetricError
from textrich.metrics import (
    MetricReport, SpottingMatchMode, anls, one_minus_ned, parse_table, relaxed_accuracy, report_from_counts,
    rms_f1, spotting_counts,
)

DEFAULT_SIZE = 64
DEFAULT_BINS = 1000


def read_jsonl(path) -> tuple[list[dict], int]:
    """Records of a JSONL file and the number of unparseable lines skipped."""
    records, skipped = [], 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                skipped += 1
                continue
            if not isinstance(rec, dict) or not isinstance(rec.get("id"), str):
                skipped += 1
                continue
            records.append(rec)
    return records, skipped


def is_instance_task(rec: dict) -> bool:
    return rec.get("task") == "spotting" or (
        rec.get("task") == "translation" and rec.get("params", {}).get("mode") in ("detect", "spot"))


def _instances(text: str, rec: dict, vocab: Vocab, diagnostics: Counter) -> list[TextInstance]:
    w = rec.get("width", DEFAULT_SIZE)
    h = rec.get("height", DEFAULT_SIZE)
    found, diags = parse_instances(encode_escaped(text, vocab), vocab, w, h)
    for d in diags:
        diagnostics[d.kind] += 1
    return found


def _gt_instances(rec: dict, vocab: Vocab) -> list[TextInstance]:
    if rec.get("instances") is not None:
        return [TextInstance.from_dict(d) for d in rec["instances"]]
    return _instances(rec["target"], rec, vocab, Counter())


def _mean(xs) -> float:
    xs = list(xs)
    return sum(xs) / len(xs) if xs else 0.0


def _table_score(pred: str, gt: str, fmt: str) -> float:
    gt_table = parse_table(gt, fmt)
    try:
        pred_table = parse_table(pred, fmt)
    except MetricError:
        return 0.0
    return rms_f1(pred_table, gt_table).value


def score_group(task: str, pairs: list[tuple[str, dict]], bins: int, diagnostics: Counter) -> list[MetricReport]:
    """Metrics for one task over ``(prediction text, gt record)`` pairs."""
    n = len(pairs)
    if task == "instances":
        vocab = Vocab(bins)
        tot = {m: Counter() for m in SpottingMatchMode}
        for out, rec in pairs:
            preds = _instances(out, rec, vocab, diagnostics)
            gts = _gt_instances(rec, vocab)
            for mode in SpottingMatchMode:
                tot[mode].update(spotting_counts(preds, gts, mode))
        reports = []
        for mode in SpottingMatchMode:
            keys = ("pred", "gt", "matched") + (("pos",) if mode is SpottingMatchMode.POINT else ())
            c = {k: tot[mode].get(k, 0) for k in keys}
            reports.append(report_from_counts(c, mode))
        point = reports[1]
        reports.append(MetricReport("spotting_pos_f1", point.counts["pos_f1"], point.counts["pos_precision"],
                                    point.counts["pos_recall"], {k: point.counts[k] for k in ("pred", "gt", "pos")}))
        return reports
    counts = {"records": n}
    out: list[MetricReport] = []
    if task in ("doc_parse", "translation", "chart_parse"):
        out.append(MetricReport("one_minus_ned", _mean(one_minus_ned(p, r["target"]) for p, r in pairs), counts=counts))
    if task == "chart_parse":
        scores = [_table_score(p, r["target"], r.get("params", {}).get("format", "CSV")) for p, r in pairs]
        out.append(MetricReport("rms_f1", _mean(scores), counts=counts))
    if task in ("kie", "doc_vqa", "table_qa"):
        out.append(MetricReport("anls", anls((p, r["target"]) for p, r in pairs) if pairs else 0.0, counts=counts))
    if task in ("table_qa", "chart_parse", "kie", "doc_vqa"):
        out.append(MetricReport("relaxed_accuracy", _mean(relaxed_accuracy(p, r["target"]) for p, r in pairs),
                                counts=counts))
    if task in ("kie", "pure_text", "doc_vqa", "table_qa"):
        out.append(MetricReport("exact_match", _mean(float(p == r["target"]) for p, r in pairs), counts=counts))
    return out


def evaluate_records(preds: list[dict], gts: list[dict], task: str | None = None,
                     bins: int | None = None) -> dict:
    """Align records by id and score every task group; returns the report dict."""
    if task is not None and task not in TASKS:
        raise MetricError(f"unknown task {task!r}; expected one of {list(TASKS)}")
    gt_by_id: dict[str, dict] = {}
    skipped_gt = 0
    for rec in gts:
        if rec["id"] in gt_by_id:
            raise AlignmentError(f"duplicate ground-truth id {rec['id']!r}")
        if not isinstance(rec.get("target"), str) or rec.get("task") not in TASKS:
            skipped_gt += 1
            continue
        gt_by_id[rec["id"]] = rec
    pred_by_id: dict[str, str] = {}
    skipped_pred = 0
    for rec in preds:
        if rec["id"] in pred_by_id:
            raise AlignmentError(f"duplicate prediction id {rec['id']!r}")
        if rec["id"] not in gt_by_id:
            raise AlignmentError(f"prediction id {rec['id']!r} has no ground-truth record")
        if not isinstance(rec.get("output"), str):
            skipped_pred += 1
            continue
        pred_by_id[rec["id"]] = rec["output"]
    groups: dict[str, list] = defaultdict(list)
    for gid, rec in gt_by_id.items():
        if task is not None and rec["task"] != task:
            continue
        key = "instances" if is_instance_task(rec) else rec["task"]
        groups[key].append((pred_by_id.get(gid, ""), rec))
    diagnostics: Counter = Counter()
    metrics = []
    for key in sorted(groups):
        for r in score_group(key, groups[key], bins or groups[key][0][1].get("bins", DEFAULT_BINS), diagnostics):
            metrics.append({"group": key, **r.to_dict()})
    n_scored = sum(len(v) for v in groups.values())
    return {
        "task": task or "all",
        "records": n_scored,
        "missing_predictions": sum(1 for v in groups.values() for _, r in v if r["id"] not in pred_by_id),
        "skipped": {"pred": skipped_pred, "gt": skipped_gt},
        "diagnostics": dict(sorted(diagnostics.items())),
        "metrics": metrics,
    }


def evaluate_run(pred_path, gt_path, task: str | None = None, bins: int | None = None) -> dict:
    preds, bad_pred = read_jsonl(pred_path)
    gts, bad_gt = read_jsonl(gt_path)
    report = evaluate_records(preds, gts, task, bins)
    report["skipped"]["pred"] += bad_pred
    report["skipped"]["gt"] += bad_gt
    return report


def metric_value(report: dict, name: str, group: str | None = None) -> float:
    for m in report["metrics"]:
        if m["name"] == name and (group is None or m["group"] == group):
            return m["value"]
    raise KeyError(name)
