"""Independent label checks for generated samples.

Targets are rebuilt from each sample's ``meta`` ground truth (and, for charts,
from the pixels alone) without calling the generator's own formatting helpers.
"""

from __future__ import annotations

import json

import numpy as np

from textrich.codec import TextInstance, Vocab, decode_text, serialize_instances
from textrich.synth.font import ADVANCE, GLYPH_H, GLYPH_W, GLYPHS
from textrich.synth.generators import BAR_COLOR, BAR_UNIT, BASELINE, GeneratorConfig, Sample


def glyph_box(text: str, x: int, y: int, scale: int) -> tuple[int, int, int, int]:
    """Tight ink box of a rendered word, from the font bitmaps directly."""
    cols, rows = [], []
    for i, ch in enumerate(text):
        bitmap = GLYPHS[ch]
        for c in np.flatnonzero(bitmap.any(axis=0)):
            cols.append(i * ADVANCE + int(c))
        rows.extend(int(r) for r in np.flatnonzero(bitmap.any(axis=1)))
    return (x + min(cols) * scale, y + min(rows) * scale,
            x + (max(cols) + 1) * scale, y + (max(rows) + 1) * scale)


def _serialized(instances, size: int, bins: int) -> str:
    vocab = Vocab(bins)
    return decode_text(serialize_instances(instances, size, size, vocab), vocab)


def _markdown_table(rows) -> str:
    out = []
    for k, row in enumerate(rows):
        out.append("| %s |" % " | ".join(row))
        if k == 0:
            out.append("| %s |" % " | ".join(["---"] * len(row)))
    return "\n".join(out)


def read_bar_chart(image: np.ndarray) -> tuple[list[str], list[int]]:
    """Recover labels and values from a rendered bar chart by pixel measurement."""
    gray = image[..., 0]
    bar_cols = np.flatnonzero(gray[BASELINE - 1] == BAR_COLOR)
    runs: list[list[int]] = []
    for c in bar_cols:
        if runs and c == runs[-1][-1] + 1:
            runs[-1].append(int(c))
        else:
            runs.append([int(c)])
    labels, values = [], []
    for run in runs:
        height = int((gray[:BASELINE, run[0]] == BAR_COLOR).sum())
        values.append(round(height / BAR_UNIT))
        cell = gray[BASELINE + 2:BASELINE + 2 + GLYPH_H, run[0]:run[0] + GLYPH_W] == 0
        matches = [ch for ch, bm in GLYPHS.items() if ch.isupper() and np.array_equal(bm, cell)]
        labels.append(matches[0] if len(matches) == 1 else "?")
    return labels, values


def recompute_target(sample: Sample, config: GeneratorConfig | None = None) -> str:
    cfg = config or GeneratorConfig()
    m = sample.meta
    size = cfg.image_size
    if sample.task == "spotting":
        boxes = [TextInstance(*glyph_box(t, x, y, s), t) for t, x, y, s in m["words"]]
        return _serialized(boxes, size, cfg.bins)
    if sample.task == "doc_parse":
        text = "\n".join(["# " + m["title"]] + list(m["lines"]))
        if m["table"]:
            text += "\n\n" + _markdown_table(m["table"])
        return text
    if sample.task == "chart_parse":
        labels, values = read_bar_chart(sample.image)
        fmt = m["format"]
        if fmt == "CSV":
            return "category,value\n" + "\n".join(f"{k},{v}" for k, v in zip(labels, values))
        if fmt == "Markdown":
            return _markdown_table([["category", "value"]] + [[k, str(v)] for k, v in zip(labels, values)])
        return json.dumps([{"category": k, "value": v} for k, v in zip(labels, values)])
    if sample.task == "kie":
        return dict(m["fields"])[m["query"]]
    if sample.task == "doc_vqa":
        return m["title"] if m["schema"] == "title" else str(len(m["lines"]))
    if sample.task == "table_qa":
        rows, header = m["rows"], m["header"]
        if m["schema"] == "cell":
            return str(rows[m["row"]][m["col"]])
        if m["schema"] == "sum":
            return str(sum(r[m["col"]] for r in rows))
        maxima = [f"the maximum of {h} is {max(r[c] for r in rows)}" for c, h in enumerate(header)]
        return "T" + ", ".join(maxima)[1:] + "."
    if sample.task == "translation":
        if sample.params.get("mode") == "detect":
            boxes = [TextInstance(*glyph_box(t, x, y, s), cfg.dictionary[t]) for t, x, y, s in m["words"]]
            return _serialized(boxes, size, cfg.bins)
        return " ".join(cfg.dictionary[w] for w in m["words"])
    if sample.task == "pure_text":
        return m["text"] if m["kind"] == "copy" else str(m["a"] + m["b"])
    raise KeyError(sample.task)


def glyph_box_violations(sample: Sample) -> int:
    """Number of instances whose glyph pixels leave their box (spotting-style samples).

    Also counts ink pixels of the image covered by no box at all.
    """
    if not sample.instances:
        return 0
    bad = 0
    for (text, x, y, scale), inst in zip(sample.meta["words"], sample.instances):
        canvas = np.zeros(sample.image.shape[:2], dtype=bool)
        for i, ch in enumerate(text):
            bm = GLYPHS[ch].repeat(scale, 0).repeat(scale, 1)
            x0 = x + i * ADVANCE * scale
            canvas[y:y + bm.shape[0], x0:x0 + bm.shape[1]] |= bm
        inside = np.zeros_like(canvas)
        inside[int(inst.y1):int(inst.y2), int(inst.x1):int(inst.x2)] = True
        bad += int((canvas & ~inside).any())
    ink = sample.image[..., 0] < 255
    covered = np.zeros_like(ink)
    for inst in sample.instances:
        covered[int(inst.y1):int(inst.y2), int(inst.x1):int(inst.x2)] = True
    bad += int((ink & ~covered).sum())
    return bad


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0
