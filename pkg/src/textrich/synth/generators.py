"""Seeded generators for every task family.

Each generator is a pure function of ``(seed, config)``.  Besides the
image/prompt/target triple, every sample carries ``meta``: the internal ground
truth the target was built from, which :mod:`textrich.synth.oracle` uses to
recompute the target independently.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

import numpy as np

from textrich.codec import TextInstance, Vocab, build_prompt, decode_text, encode_escaped, serialize_instances
from textrich.errors import ConfigError, GenerationError
from textrich.synth import render
from textrich.synth.font import ADVANCE, GLYPH_H, LINE_ADVANCE, text_width

DEFAULT_DICTIONARY = {
    "uno": "one", "dos": "two", "tres": "three", "gato": "cat", "casa": "house", "sol": "sun",
    "mar": "sea", "luz": "light", "pan": "bread", "rojo": "red", "azul": "blue", "flor": "flower",
}
CHART_FORMATS = ("CSV", "Markdown", "JSON")
BAR_UNIT = 5
BAR_WIDTH = 6
BAR_PITCH = 10
BAR_X0 = 11
AXIS_X = 8
BASELINE = 52
BAR_COLOR = 96


@dataclass
class GeneratorConfig:
    image_size: int = 64
    word_count: tuple = (1, 5)
    word_length: tuple = (2, 5)
    scales: tuple = (1, 2)
    chart_types: tuple = ("bar",)
    bar_count: tuple = (2, 5)
    table_rows: tuple = (2, 3)
    table_cols: tuple = (2, 3)
    kie_keys: tuple = ("total", "date", "tax", "name", "id", "shop")
    dictionary: dict = field(default_factory=lambda: dict(DEFAULT_DICTIONARY))
    language: str = "English"
    table_probability: float = 0.3
    bins: int = 1000
    seed: int = 0

    def validate(self) -> None:
        for name in ("word_count", "word_length", "bar_count", "table_rows", "table_cols"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} range {lo}..{hi} is empty")
        if self.image_size < 64:
            raise ConfigError("generators lay out content for images of at least 64 px")
        if not self.scales or not self.kie_keys or not self.dictionary or not self.chart_types:
            raise ConfigError("scales, kie_keys, dictionary and chart_types must be non-empty")
        if set(self.chart_types) - {"bar"}:
            raise ConfigError(f"unsupported chart types {set(self.chart_types) - {'bar'}}")
        if self.word_count[1] > 5 or self.bar_count[1] > 5 or self.table_rows[1] > 3 or self.table_cols[1] > 3:
            raise ConfigError("ranges exceed what fits on the canvas")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for k in ("word_count", "word_length", "scales", "chart_types", "bar_count", "table_rows",
                  "table_cols", "kie_keys"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self).items()}


@dataclass
class Sample:
    id: str
    task: str
    prompt: str
    target: str
    image: np.ndarray | None = None
    instances: list | None = None
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def target_ids(self, vocab: Vocab) -> list[int]:
        return encode_escaped(self.target, vocab)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _between(rng, lo_hi) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _word(rng, length: int, alphabet: str = string.ascii_letters + string.digits) -> str:
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=length))


def _intersects(a, b, margin: int = 1) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def place_words(rng, words: list[str], scales, size: int, attempts: int = 100,
                restarts: int = 20) -> list[tuple]:
    """Random non-overlapping positions; returns ``(text, x, y, scale)`` per word.

    A crowded layout is restarted from scratch; the later half of the restarts
    only use the smallest scale.
    """
    smallest = min(scales)
    for restart in range(restarts):
        placed: list[tuple] = []
        boxes: list[tuple] = []
        for text in words:
            scale = smallest if restart >= restarts // 2 else int(scales[int(rng.integers(0, len(scales)))])
            w, h = text_width(text, scale), GLYPH_H * scale
            if w > size or h > size:
                break
            for _ in range(attempts):
                x = int(rng.integers(0, size - w + 1))
                y = int(rng.integers(0, size - h + 1))
                box = (x, y, x + w, y + h)
                if not any(_intersects(box, b) for b in boxes):
                    placed.append((text, x, y, scale))
                    boxes.append(box)
                    break
            else:
                break
        if len(placed) == len(words):
            return placed
    raise GenerationError(f"could not place words {words!r} on a {size} px canvas")


def render_words(size: int, layout) -> tuple[np.ndarray, list[TextInstance]]:
    canvas = render.blank(size)
    instances = []
    for text, x, y, scale in layout:
        x1, y1, x2, y2 = render.draw_text(canvas, text, x, y, scale)
        instances.append(TextInstance(x1, y1, x2, y2, text))
    return canvas, instances


def _serialized(instances, size: int, bins: int) -> str:
    vocab = Vocab(bins)
    return decode_text(serialize_instances(instances, size, size, vocab), vocab)


# ----------------------------------------------------------------------------
# Perception families
# ----------------------------------------------------------------------------


def gen_spotting(seed: int, config: GeneratorConfig | None = None) -> Sample:
    cfg = config or GeneratorConfig()
    rng = _rng(seed)
    n = _between(rng, cfg.word_count)
    words = [_word(rng, _between(rng, cfg.word_length)) for _ in range(n)]
    layout = place_words(rng, words, cfg.scales, cfg.image_size)
    image, instances = render_words(cfg.image_size, layout)
    return Sample(
        id=f"spotting-{seed}", task="spotting", prompt=build_prompt("spotting"),
        target=_serialized(instances, cfg.image_size, cfg.bins), image=image,
        instances=instances, meta={"words": [list(w) for w in layout]},
    )


def pipe_table(rows: list[list[str]]) -> str:
    """Markdown pipe table; the first row is the header."""
    head, *body = rows
    lines = ["| " + " | ".join(head) + " |", "| " + " | ".join("---" for _ in head) + " |"]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines)


def render_document(title: str, lines: list[str], table: list[list[str]] | None = None,
                    size: int = 64) -> tuple[np.ndarray, str]:
    """Title, body lines and an optional ruled table; returns image and markdown."""
    canvas = render.blank(size)
    render.draw_text(canvas, title, 2, 2)
    md = [f"# {title}"]
    y = 2
    for line in lines:
        y += LINE_ADVANCE
        render.draw_text(canvas, line, 2, y)
        md.append(line)
    text = "\n".join(md)
    if table:
        render.draw_grid_table(canvas, table, 2, y + LINE_ADVANCE)
        text += "\n\n" + pipe_table(table)
    return canvas, text


def _doc_content(rng, cfg: GeneratorConfig, allow_table: bool):
    title = _word(rng, _between(rng, (2, 5)), string.ascii_uppercase)
    with_table = allow_table and rng.random() < cfg.table_probability
    n_lines = 2 if with_table else _between(rng, (2, 4))
    lines = []
    for _ in range(n_lines):
        words = [_word(rng, _between(rng, (2, 4)), string.ascii_lowercase)]
        extra = _word(rng, _between(rng, (2, 4)), string.ascii_lowercase)
        if rng.random() < 0.5 and len(words[0]) + 1 + len(extra) <= 9:
            words.append(extra)
        lines.append(" ".join(words))
    table = None
    if with_table:
        r, c = _between(rng, cfg.table_rows), _between(rng, cfg.table_cols)
        alphabet = string.ascii_lowercase + string.digits
        table = [[alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=c)] for _ in range(r)]
    return title, lines, table


def gen_doc_parse(seed: int, config: GeneratorConfig | None = None) -> Sample:
    cfg = config or GeneratorConfig()
    rng = _rng(seed)
    title, lines, table = _doc_content(rng, cfg, allow_table=True)
    image, markdown = render_document(title, lines, table, cfg.image_size)
    return Sample(
        id=f"doc_parse-{seed}", task="doc_parse", prompt=build_prompt("doc_parse"), target=markdown,
        image=image, meta={"title": title, "lines": lines, "table": table},
    )


def chart_table_text(labels: list[str], values: list[int], fmt: str) -> str:
    if fmt == "CSV":
        return "\n".join(["category,value"] + [f"{k},{v}" for k, v in zip(labels, values)])
    if fmt == "Markdown":
        return pipe_table([["category", "value"]] + [[k, str(v)] for k, v in zip(labels, values)])
    if fmt == "JSON":
        return json.dumps([{"category": k, "value": v} for k, v in zip(labels, values)])
    raise ConfigError(f"unknown chart format {fmt!r}; expected one of {CHART_FORMATS}")


def render_bar_chart(labels: list[str], values: list[int], size: int = 64) -> np.ndarray:
    canvas = render.blank(size)
    render.vline(canvas, AXIS_X, 4, BASELINE + 1)
    render.hline(canvas, AXIS_X, size - 1, BASELINE)
    for i, (label, value) in enumerate(zip(labels, values)):
        bx = BAR_X0 + i * BAR_PITCH
        render.fill_rect(canvas, bx, BASELINE - value * BAR_UNIT, bx + BAR_WIDTH, BASELINE, BAR_COLOR)
        render.draw_text(canvas, label, bx, BASELINE + 2)
    return canvas


def gen_chart(seed: int, config: GeneratorConfig | None = None, target_format: str | None = None) -> Sample:
    cfg = config or GeneratorConfig()
    rng = _rng(seed)
    fmt = target_format or CHART_FORMATS[int(rng.integers(0, len(CHART_FORMATS)))]
    if fmt not in CHART_FORMATS:
        raise ConfigError(f"unknown chart format {fmt!r}; expected one of {CHART_FORMATS}")
    n = _between(rng, cfg.bar_count)
    labels = [string.ascii_uppercase[int(i)] for i in rng.choice(26, size=n, replace=False)]
    values = [int(v) for v in rng.integers(1, 10, size=n)]
    return Sample(
        id=f"chart_parse-{seed}", task="chart_parse", prompt=build_prompt("chart_parse", {"format": fmt}),
        target=chart_table_text(labels, values, fmt), image=render_bar_chart(labels, values, cfg.image_size),
        params={"format": fmt}, meta={"labels": labels, "values": values, "format": fmt},
    )


# ----------------------------------------------------------------------------
# Comprehension families
# ----------------------------------------------------------------------------


def render_lines(lines: list[str], size: int = 64) -> np.ndarray:
    canvas = render.blank(size)
    for k, line in enumerate(lines):
        render.draw_text(canvas, line, 2, 2 + k * LINE_ADVANCE)
    return canvas


def gen_kie(seed: int, config: GeneratorConfig | None = None) -> Sample:
    cfg = config or GeneratorConfig()
    rng = _rng(seed)
    n = min(_between(rng, (2, 4)), len(cfg.kie_keys))
    keys = [cfg.kie_keys[int(i)] for i in rng.choice(len(cfg.kie_keys), size=n, replace=False)]
    values = [_word(rng, _between(rng, (1, 3)), string.digits) for _ in keys]
    lines = [f"{k}: {v}" for k, v in zip(keys, values)]
    q = int(rng.integers(0, n))
    return Sample(
        id=f"kie-{seed}", task="kie", prompt=build_prompt("kie", {"key": keys[q]}), target=values[q],
        image=render_lines(lines, cfg.image_size), params={"key": keys[q]},
        meta={"fields": [[k, v] for k, v in zip(keys, values)], "query": keys[q]},
    )


VQA_QUESTIONS = {"title": "What is the title?", "count": "How many lines are there?"}


def gen_doc_vqa(seed: int, config: GeneratorConfig | None = None) -> Sample:
    cfg = config or GeneratorConfig()
    rng = _rng(seed)
    title, lines, _ = _doc_content(rng, cfg, allow_table=False)
    image, _ = render_document(title, lines, None, cfg.image_size)
    schema = "title" if rng.random() < 0.5 else "count"
    answer = title if schema == "title" else str(len(lines))
    question = VQA_QUESTIONS[schema]
    return Sample(
        id=f"doc_vqa-{seed}", task="doc_vqa", prompt=build_prompt("doc_vqa", {"question": question}),
        target=answer, image=image, params={"question": question},
        meta={"title": title, "lines": lines, "schema": schema},
    )


def table_answer(header: list[str], rows: list[list[int]], schema: str, row: int = 0, col: int = 0):
    """Question text and answer for a table QA schema."""
    if schema == "cell":
        return f"What is the value at row {row + 1}, column {header[col]}?", str(rows[row][col])
    if schema == "sum":
        return f"What is the sum of column {header[col]}?", str(sum(r[col] for r in rows))
    if schema == "summary":
        parts = [f"the maximum of {h} is {max(r[c] for r in rows)}" for c, h in enumerate(header)]
        return "Summarize the table.", ("The " + ", ".join(parts)[4:] + ".") if parts else ""
    raise ConfigError(f"unknown table schema {schema!r}")


def gen_table_qa(seed: int, config: GeneratorConfig | None = None) -> Sample:
    cfg = config or GeneratorConfig()
    rng = _rng(seed)
    r, c = _between(rng, cfg.table_rows), _between(rng, cfg.table_cols)
    header = list(string.ascii_uppercase[:c])
    rows = [[int(v) for v in rng.integers(0, 10, size=c)] for _ in range(r)]
    canvas = render.blank(cfg.image_size)
    render.draw_grid_table(canvas, [header] + [[str(v) for v in row] for row in rows], 2, 2)
    schema = ("cell", "sum", "summary")[int(rng.integers(0, 3))]
    qr, qc = int(rng.integers(0, r)), int(rng.integers(0, c))
    question, answer = table_answer(header, rows, schema, qr, qc)
    return Sample(
        id=f"table_qa-{seed}", task="table_qa", prompt=build_prompt("table_qa", {"question": question}),
        target=answer, image=canvas, params={"question": question},
        meta={"header": header, "rows": rows, "schema": schema, "row": qr, "col": qc},
    )


def gen_translation(seed: int, config: GeneratorConfig | None = None, with_detection: bool = False) -> Sample:
    cfg = config or GeneratorConfig()
    rng = _rng(seed)
    keys = sorted(cfg.dictionary)
    n = _between(rng, (1, 3))
    words = [keys[int(i)] for i in rng.integers(0, len(keys), size=n)]
    for w in words:
        if w not in cfg.dictionary:
            raise GenerationError(f"word {w!r} missing from dictionary")
    mode = "detect" if with_detection else "line"
    params = {"language": cfg.language, "mode": mode}
    if with_detection:
        layout = place_words(rng, words, cfg.scales, cfg.image_size)
        image, src = render_words(cfg.image_size, layout)
        translated = [TextInstance(i.x1, i.y1, i.x2, i.y2, cfg.dictionary[i.text]) for i in src]
        target = _serialized(translated, cfg.image_size, cfg.bins)
        instances = translated
        meta = {"words": [list(w) for w in layout]}
    else:
        max_chars = (cfg.image_size - 4 + 1) // ADVANCE
        while len(" ".join(words)) > max_chars:
            words.pop()
        line = " ".join(words)
        x = int(rng.integers(0, cfg.image_size - text_width(line) + 1))
        y = int(rng.integers(0, cfg.image_size - GLYPH_H + 1))
        image = render.blank(cfg.image_size)
        render.draw_text(image, line, x, y)
        target = " ".join(cfg.dictionary[w] for w in words)
        instances = None
        meta = {"words": words, "x": x, "y": y}
    return Sample(
        id=f"translation-{seed}", task="translation", prompt=build_prompt("translation", params),
        target=target, image=image, instances=instances, params=params, meta=meta,
    )


def gen_pure_text(seed: int, config: GeneratorConfig | None = None) -> Sample:
    rng = _rng(seed)
    if rng.random() < 0.5:
        text = _word(rng, _between(rng, (2, 6)), string.ascii_lowercase)
        prompt, target, meta = f"repeat: {text}", text, {"kind": "copy", "text": text}
    else:
        a, b = (int(v) for v in rng.integers(0, 10, size=2))
        prompt, target, meta = f"add: {a}+{b}", str(a + b), {"kind": "add", "a": a, "b": b}
    return Sample(id=f"pure_text-{seed}", task="pure_text", prompt=prompt, target=target,
                  params={"text": prompt}, meta=meta)


GENERATORS = {
    "spotting": gen_spotting,
    "doc_parse": gen_doc_parse,
    "chart_parse": gen_chart,
    "kie": gen_kie,
    "doc_vqa": gen_doc_vqa,
    "table_qa": gen_table_qa,
    "translation": gen_translation,
    "pure_text": gen_pure_text,
}


def generate(task: str, seed: int, config: GeneratorConfig | None = None, **kwargs) -> Sample:
    if task not in GENERATORS:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(GENERATORS)}")
    if task == "translation" and "with_detection" not in kwargs:
        kwargs["with_detection"] = bool(seed % 2)
    return GENERATORS[task](seed, config, **kwargs)


def sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(counts: dict, config: GeneratorConfig | None = None, seed: int = 0,
                     chart_format: str | None = None) -> list[Sample]:
    """``counts`` maps task -> number of samples; order follows ``counts``."""
    cfg = config or GeneratorConfig()
    unknown = set(counts) - set(GENERATORS)
    if unknown:
        raise ConfigError(f"unknown tasks {sorted(unknown)}; expected one of {sorted(GENERATORS)}")
    out = []
    for t_index, (task, n) in enumerate(counts.items()):
        for i in range(int(n)):
            s = sample_seed(seed, t_index * 1_000_000 + i)
            kwargs = {"target_format": chart_format} if task == "chart_parse" and chart_format else {}
            out.append(generate(task, s, cfg, **kwargs))
    return out
