"""Evaluation metrics: edit-distance scores, relaxed accuracy, spotting P/R/F1, RMS-F1."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from textrich.codec import TextInstance
from textrich.errors import MetricError


@dataclass
class MetricReport:
    name: str
    value: float
    precision: float | None = None
    recall: float | None = None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def prf(matched: float, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    """Precision, recall, F1.  Nothing predicted and nothing expected scores 1."""
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


# ----------------------------------------------------------------------------
# String metrics
# ----------------------------------------------------------------------------


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance over code points (two-row dynamic programme)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ned(a: str, b: str) -> float:
    if not a and not b:
        return 0.0
    return levenshtein(a, b) / max(len(a), len(b))


def one_minus_ned(pred: str, gt: str) -> float:
    return 1.0 - ned(pred, gt)


def _norm(s: str) -> str:
    return " ".join(s.split()).casefold()


def anls(pairs, threshold: float = 0.5) -> float:
    """Mean over pairs of the best thresholded similarity to any accepted answer.

    ``pairs`` holds ``(pred, gts)`` where ``gts`` is a string or a non-empty list.
    """
    pairs = list(pairs)
    if not pairs:
        raise MetricError("anls needs at least one pair")
    total = 0.0
    for pred, gts in pairs:
        gts = [gts] if isinstance(gts, str) else list(gts)
        if not gts:
            raise MetricError("empty ground-truth answer list")
        best = max(1.0 - ned(_norm(pred), _norm(g)) for g in gts)
        total += best if best >= threshold else 0.0
    return total / len(pairs)


def parse_number(s: str) -> float | None:
    t = s.strip().replace(",", "")
    if t.endswith("%"):
        t = t[:-1]
    try:
        v = float(t)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def relaxed_accuracy(pred: str, gt: str, tol: float = 0.05) -> int:
    p, g = parse_number(pred), parse_number(gt)
    if p is not None and g is not None:
        if g == 0:
            return int(p == 0)
        return int(abs(p - g) <= tol * abs(g))
    return int(_norm(pred) == _norm(gt))


# ----------------------------------------------------------------------------
# Spotting
# ----------------------------------------------------------------------------


class SpottingMatchMode(str, Enum):
    TRANSCRIPTION = "transcription_only"
    POINT = "point_and_transcription"


def _center_inside(pred: TextInstance, gt: TextInstance) -> bool:
    cx, cy = pred.center
    return gt.x1 <= cx <= gt.x2 and gt.y1 <= cy <= gt.y2


def _center_distance(pred: TextInstance, gt: TextInstance) -> float:
    (px, py), (gx, gy) = pred.center, gt.center
    return math.hypot(px - gx, py - gy)


def transcription_matches(preds, gts) -> int:
    """Size of the multiset intersection of transcriptions (case-sensitive)."""
    pool: dict[str, int] = {}
    for g in gts:
        pool[g.text] = pool.get(g.text, 0) + 1
    hits = 0
    for p in preds:
        if pool.get(p.text, 0):
            pool[p.text] -= 1
            hits += 1
    return hits


# tie-break so that, among equally close assignments, transcription agreement wins
_TEXT_TIE = 1e-6


def point_cost(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    """Cost matrix (centre distance) and validity mask (pred centre inside gt box)."""
    cost = np.zeros((len(preds), len(gts)))
    valid = np.zeros((len(preds), len(gts)), dtype=bool)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            valid[i, j] = _center_inside(p, g)
            cost[i, j] = _center_distance(p, g) + _TEXT_TIE * (p.text != g.text)
    return cost, valid


def point_assignment(preds, gts) -> list[tuple[int, int]]:
    """Maximum-cardinality one-to-one matching of minimal total centre distance."""
    if not preds or not gts:
        return []
    cost, valid = point_cost(preds, gts)
    if not valid.any():
        return []
    big = 1.0 + cost[valid].sum() * 2
    rows, cols = linear_sum_assignment(np.where(valid, cost, big))
    return [(int(i), int(j)) for i, j in zip(rows, cols) if valid[i, j]]


def spotting_counts(preds, gts, mode: SpottingMatchMode | str) -> dict:
    """Matched counts for one image: ``{"pred", "gt", "matched"}`` plus ``"pos"`` in point mode."""
    mode = SpottingMatchMode(mode)
    if mode is SpottingMatchMode.TRANSCRIPTION:
        return {"pred": len(preds), "gt": len(gts), "matched": transcription_matches(preds, gts)}
    pairs = point_assignment(preds, gts)
    trans = sum(preds[i].text == gts[j].text for i, j in pairs)
    return {"pred": len(preds), "gt": len(gts), "matched": trans, "pos": len(pairs)}


def spotting_prf(preds, gts, mode: SpottingMatchMode | str = SpottingMatchMode.TRANSCRIPTION) -> MetricReport:
    c = spotting_counts(list(preds), list(gts), mode)
    return report_from_counts(c, mode)


def report_from_counts(c: dict, mode: SpottingMatchMode | str) -> MetricReport:
    mode = SpottingMatchMode(mode)
    p, r, f = prf(c["matched"], c["pred"], c["gt"])
    counts = dict(c)
    if "pos" in c:
        pp, pr, pf = prf(c["pos"], c["pred"], c["gt"])
        counts.update(pos_precision=pp, pos_recall=pr, pos_f1=pf)
    name = "spotting_f1" if mode is SpottingMatchMode.TRANSCRIPTION else "spotting_trans_f1"
    return MetricReport(name, f, p, r, counts)


# ----------------------------------------------------------------------------
# Tables and RMS-F1
# ----------------------------------------------------------------------------


@dataclass
class DataTable:
    columns: list
    rows: list  # (row header, cells)

    def __post_init__(self):
        for header, cells in self.rows:
            if len(cells) != len(self.columns):
                raise MetricError(f"row {header!r} has {len(cells)} cells for {len(self.columns)} columns")

    def entries(self) -> list[tuple[str, str]]:
        return [(f"{header} {col}", cell) for header, cells in self.rows for col, cell in zip(self.columns, cells)]


def _from_grid(grid: list[list[str]]) -> DataTable:
    if len(grid) < 2 or len(grid[0]) < 2:
        raise MetricError("table needs a header row and at least one data row with a value column")
    head, *body = grid
    return DataTable([c.strip() for c in head[1:]], [(r[0].strip(), [c.strip() for c in r[1:]]) for r in body])


def parse_table(text: str, fmt: str) -> DataTable:
    """Parse CSV, Markdown pipe table or JSON records; first column is the row header."""
    fmt = fmt.lower()
    if fmt == "csv":
        grid = [row for row in csv.reader(io.StringIO(text.strip())) if row]
        return _from_grid(grid)
    if fmt == "markdown":
        grid = []
        for line in text.strip().splitlines():
            line = line.strip()
            if not line.startswith("|"):
                continue
            cells = [c.strip() for c in line.strip("|").split("|")]
            if all(set(c) <= set("-: ") and c for c in cells):
                continue
            grid.append(cells)
        return _from_grid(grid)
    if fmt == "json":
        try:
            records = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MetricError(f"bad JSON table: {exc}") from None
        if not isinstance(records, list) or not records or not all(isinstance(r, dict) and r for r in records):
            raise MetricError("JSON table must be a non-empty list of objects")
        keys = list(records[0])
        grid = [keys] + [[str(r.get(k, "")) for k in keys] for r in records]
        return _from_grid(grid)
    raise MetricError(f"unknown table format {fmt!r}")


def entry_similarity(pred: tuple[str, str], gt: tuple[str, str]) -> float:
    key_sim = 1.0 - ned(pred[0], gt[0])
    p, g = parse_number(pred[1]), parse_number(gt[1])
    if p is not None and g is not None:
        if g == 0:
            dist = 0.0 if p == 0 else 1.0
        else:
            dist = min(1.0, abs(p - g) / abs(g))
        return key_sim * (1.0 - dist)
    return key_sim * (1.0 - ned(pred[1], gt[1]))


def similarity_matrix(pred_entries, gt_entries) -> np.ndarray:
    return np.array([[entry_similarity(p, g) for g in gt_entries] for p in pred_entries]).reshape(
        len(pred_entries), len(gt_entries))


def best_total_exhaustive(sim: np.ndarray) -> float:
    """Maximum total similarity of a one-to-one matching by enumeration."""
    n, m = sim.shape
    if n > m:
        sim, n, m = sim.T, m, n
    best = 0.0
    for cols in itertools.permutations(range(m), n):
        best = max(best, float(sum(sim[i, c] for i, c in enumerate(cols))))
    return best


def best_total(sim: np.ndarray, exhaustive_limit: int = 6) -> float:
    if max(sim.shape) <= exhaustive_limit:
        return best_total_exhaustive(sim)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    return float(sim[rows, cols].sum())


def rms_f1(pred: DataTable, gt: DataTable) -> MetricReport:
    pe, ge = pred.entries(), gt.entries()
    if not pe or not ge:
        raise MetricError("rms_f1 needs at least one entry in each table")
    total = best_total(similarity_matrix(pe, ge))
    p, r = total / len(pe), total / len(ge)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return MetricReport("rms_f1", f, p, r, {"pred": len(pe), "gt": len(ge), "matched": total})
