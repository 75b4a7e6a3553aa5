"""Token vocabulary, text-instance serialization and prompt templates.

Layout of the vocabulary (``B`` coordinate bins)::

    [0, 256)              raw bytes
    [256, 256+B)          <pos_x_i>
    [256+B, 256+2B)       <pos_y_i>
    [256+2B, 256+2B+5)    <ref> </ref> <bos> <eos> <pad>

A text instance serializes to ``x1 y1 x2 y2 <ref> bytes... </ref>`` with one
token per coordinate.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from textrich.errors import EncodingError, RangeError, TemplateError, VocabError

CONTROL_TOKENS = ("<ref>", "</ref>", "<bos>", "<eos>", "<pad>")
N_BYTES = 256
FULL_VOCAB_SIZE = 160_000
MANIFEST_MAGIC = "#textrich-vocab v1"


class Vocab:
    def __init__(self, bins: int = 1000):
        if bins < 2:
            raise RangeError(f"need at least 2 coordinate bins, got {bins}")
        self.bins = bins
        self.pos_x_start = N_BYTES
        self.pos_y_start = N_BYTES + bins
        self.control_start = N_BYTES + 2 * bins
        self.size = self.control_start + len(CONTROL_TOKENS)
        self.ref_id, self.end_ref_id, self.bos_id, self.eos_id, self.pad_id = (
            self.control_start + i for i in range(len(CONTROL_TOKENS)))
        self._controls = {tok: self.control_start + i for i, tok in enumerate(CONTROL_TOKENS)}

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and other.bins == self.bins

    def pos_x(self, index: int) -> int:
        return self.pos_x_start + int(index)

    def pos_y(self, index: int) -> int:
        return self.pos_y_start + int(index)

    def kind(self, token_id: int) -> str:
        """One of ``byte``, ``pos_x``, ``pos_y``, ``control`` or ``invalid``."""
        if 0 <= token_id < N_BYTES:
            return "byte"
        if token_id < self.pos_y_start and token_id >= self.pos_x_start:
            return "pos_x"
        if self.pos_y_start <= token_id < self.control_start:
            return "pos_y"
        if self.control_start <= token_id < self.size:
            return "control"
        return "invalid"

    def token_of(self, token_id: int) -> str:
        kind = self.kind(token_id)
        if kind == "byte":
            return f"<0x{token_id:02X}>"
        if kind == "pos_x":
            return f"<pos_x_{token_id - self.pos_x_start}>"
        if kind == "pos_y":
            return f"<pos_y_{token_id - self.pos_y_start}>"
        if kind == "control":
            return CONTROL_TOKENS[token_id - self.control_start]
        raise VocabError(f"token id {token_id} outside [0, {self.size})")

    def id_of(self, token: str) -> int:
        if token in self._controls:
            return self._controls[token]
        m = _TOKEN_RE.fullmatch(token)
        if m is None:
            raise VocabError(f"unknown token {token!r}")
        if m.group("byte") is not None:
            return int(m.group("byte"), 16)
        axis, idx = m.group("axis"), int(m.group("idx"))
        if idx >= self.bins:
            raise VocabError(f"coordinate bin {idx} >= {self.bins}")
        return self.pos_x(idx) if axis == "x" else self.pos_y(idx)

    def to_manifest(self) -> str:
        """Text manifest: header block declaring ranges, then one token per line by id."""
        lines = [
            MANIFEST_MAGIC,
            f"#bins {self.bins}",
            f"#range bytes {0} {N_BYTES}",
            f"#range pos_x {self.pos_x_start} {self.bins}",
            f"#range pos_y {self.pos_y_start} {self.bins}",
            f"#range control {self.control_start} {len(CONTROL_TOKENS)}",
            "#end",
        ]
        lines.extend(self.token_of(i) for i in range(self.size))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "Vocab":
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_MAGIC:
            raise VocabError("not a vocabulary manifest")
        try:
            bins = int(next(l.split()[1] for l in lines if l.startswith("#bins ")))
            end = lines.index("#end")
        except (StopIteration, ValueError, IndexError):
            raise VocabError("manifest header incomplete") from None
        vocab = cls(bins)
        body = lines[end + 1:]
        if len(body) != vocab.size:
            raise VocabError(f"manifest lists {len(body)} tokens, expected {vocab.size}")
        for i, tok in enumerate(body):
            if vocab.id_of(tok) != i:
                raise VocabError(f"manifest line {i} has token {tok!r} out of order")
        return vocab


_TOKEN_RE = re.compile(r"<0x(?P<byte>[0-9A-F]{2})>|<pos_(?P<axis>[xy])_(?P<idx>\d+)>")
_ESCAPE_RE = re.compile(r"<pos_[xy]_\d+>|</ref>|<ref>|<bos>|<eos>|<pad>|<0x[0-9A-F]{2}>|<id_\d+>")


# ----------------------------------------------------------------------------
# Plain text
# ----------------------------------------------------------------------------


def encode_text(s: str, vocab: Vocab | None = None) -> list[int]:
    try:
        return list(s.encode("utf-8"))
    except UnicodeEncodeError as exc:
        raise EncodingError(f"text is not encodable as UTF-8: {exc}") from None


def decode_text(ids, vocab: Vocab) -> str:
    """Bytes decode as UTF-8; every other id becomes a bracketed escape."""
    out: list[str] = []
    buf = bytearray()
    for t in ids:
        t = int(t)
        if 0 <= t < N_BYTES:
            buf.append(t)
            continue
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
            buf.clear()
        out.append(vocab.token_of(t) if 0 <= t < vocab.size else f"<id_{t}>")
    if buf:
        out.append(buf.decode("utf-8", errors="replace"))
    return "".join(out)


def encode_escaped(s: str, vocab: Vocab) -> list[int]:
    """Inverse of :func:`decode_text`: escapes become their ids, other text its bytes.

    Literal text spelling an escape (e.g. ``"<ref>"``) is read as the escape.
    """
    ids: list[int] = []
    pos = 0
    for m in _ESCAPE_RE.finditer(s):
        ids.extend(encode_text(s[pos:m.start()]))
        tok = m.group(0)
        if tok.startswith("<id_"):
            ids.append(int(tok[4:-1]))
        else:
            try:
                ids.append(vocab.id_of(tok))
            except VocabError:
                ids.extend(encode_text(tok))
        pos = m.end()
    ids.extend(encode_text(s[pos:]))
    return ids


# ----------------------------------------------------------------------------
# Coordinates and instances
# ----------------------------------------------------------------------------


def quantize_coord(v: float, extent: float, bins: int) -> int:
    if bins < 2:
        raise RangeError(f"bins must be >= 2, got {bins}")
    if extent <= 0:
        raise RangeError(f"extent must be positive, got {extent}")
    if not 0 <= v <= extent:
        raise RangeError(f"coordinate {v} outside [0, {extent}]")
    return min(int(math.floor(v * bins / extent)), bins - 1)


def dequantize_coord(index: int, extent: float, bins: int) -> float:
    return (index + 0.5) / bins * extent


@dataclass(frozen=True, order=True)
class TextInstance:
    x1: float
    y1: float
    x2: float
    y2: float
    text: str

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def is_valid(self, img_w: float | None = None, img_h: float | None = None) -> bool:
        if not (self.x1 < self.x2 and self.y1 < self.y2 and self.text):
            return False
        if img_w is not None and not (0 <= self.x1 and self.x2 <= img_w):
            return False
        if img_h is not None and not (0 <= self.y1 and self.y2 <= img_h):
            return False
        return True

    def to_dict(self) -> dict:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> "TextInstance":
        return cls(d["x1"], d["y1"], d["x2"], d["y2"], d["text"])


def _same_line(a: TextInstance, b: TextInstance, threshold: float) -> bool:
    overlap = min(a.y2, b.y2) - max(a.y1, b.y1)
    return overlap >= threshold * min(a.height, b.height)


def reading_order_sort(instances, line_overlap: float = 0.5) -> list[TextInstance]:
    """Top-to-bottom lines, left-to-right within a line.

    Two instances share a line when their vertical overlap is at least
    ``line_overlap`` times the smaller height; lines are the connected
    components of that relation and are ordered by mean top edge.
    """
    items = sorted(instances, key=lambda r: (r.y1, r.x1, r.y2, r.x2, r.text))
    parent = list(range(len(items)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            if _same_line(items[i], items[j], line_overlap):
                parent[find(j)] = find(i)
    lines: dict[int, list[TextInstance]] = {}
    for i, inst in enumerate(items):
        lines.setdefault(find(i), []).append(inst)
    ordered = []
    for members in lines.values():
        members.sort(key=lambda r: (r.x1, r.y1, r.x2, r.y2, r.text))
        top = sum(m.y1 for m in members) / len(members)
        ordered.append(((top, members[0].x1, members[0].y1, members[0].text), members))
    ordered.sort(key=lambda kv: kv[0])
    return [inst for _, members in ordered for inst in members]


def serialize_instances(instances, img_w: float, img_h: float, vocab: Vocab) -> list[int]:
    ids: list[int] = []
    for inst in reading_order_sort(instances):
        if not inst.text:
            raise EncodingError("empty transcription")
        ids.append(vocab.pos_x(quantize_coord(inst.x1, img_w, vocab.bins)))
        ids.append(vocab.pos_y(quantize_coord(inst.y1, img_h, vocab.bins)))
        ids.append(vocab.pos_x(quantize_coord(inst.x2, img_w, vocab.bins)))
        ids.append(vocab.pos_y(quantize_coord(inst.y2, img_h, vocab.bins)))
        ids.append(vocab.ref_id)
        ids.extend(encode_text(inst.text))
        ids.append(vocab.end_ref_id)
    return ids


@dataclass
class Diagnostic:
    kind: str  # truncated-instance | orphan-ref | non-coordinate-where-expected
    position: int


@dataclass
class _Partial:
    start: int = 0
    coords: list = field(default_factory=list)
    in_text: bool = False
    awaiting_ref: bool = False
    text: bytearray = field(default_factory=bytearray)


def parse_instances(ids, vocab: Vocab, img_w: float, img_h: float):
    """Lenient left-to-right parse of ``x y x y <ref> text </ref>`` groups.

    Malformed fragments are dropped and reported; parsing stops at ``<eos>``
    and ignores ``<pad>``.  Returns ``(instances, diagnostics)``.
    """
    instances: list[TextInstance] = []
    diags: list[Diagnostic] = []
    cur = _Partial()
    started = False

    def restart(pos, token_kind=None):
        nonlocal cur, started
        cur = _Partial(start=pos)
        started = False
        if token_kind == "pos_x":
            cur.coords.append(tok)
            started = True

    for pos, tok in enumerate(ids):
        tok = int(tok)
        kind = vocab.kind(tok)
        if tok == vocab.eos_id:
            break
        if tok == vocab.pad_id:
            continue
        if cur.in_text:
            if tok == vocab.end_ref_id:
                if cur.text:
                    instances.append(_finish(cur, vocab, img_w, img_h))
                else:
                    diags.append(Diagnostic("truncated-instance", cur.start))
                restart(pos + 1)
            elif kind == "byte":
                cur.text.append(tok)
            else:
                diags.append(Diagnostic("truncated-instance", cur.start))
                restart(pos, kind)
            continue
        if cur.awaiting_ref:
            if tok == vocab.ref_id:
                cur.awaiting_ref = False
                cur.in_text = True
            else:
                diags.append(Diagnostic("truncated-instance", cur.start))
                restart(pos, kind)
            continue
        expected = "pos_x" if len(cur.coords) % 2 == 0 else "pos_y"
        if kind == expected:
            if not started:
                cur.start = pos
                started = True
            cur.coords.append(tok)
            if len(cur.coords) == 4:
                cur.awaiting_ref = True
        elif tok in (vocab.ref_id, vocab.end_ref_id):
            diags.append(Diagnostic("orphan-ref", pos))
            restart(pos + 1)
        else:
            diags.append(Diagnostic("non-coordinate-where-expected", pos))
            restart(pos, kind)
    if cur.coords or cur.in_text or cur.awaiting_ref:
        diags.append(Diagnostic("truncated-instance", cur.start))
    return instances, diags


def _finish(cur: _Partial, vocab: Vocab, img_w: float, img_h: float) -> TextInstance:
    bx1 = cur.coords[0] - vocab.pos_x_start
    by1 = cur.coords[1] - vocab.pos_y_start
    bx2 = cur.coords[2] - vocab.pos_x_start
    by2 = cur.coords[3] - vocab.pos_y_start
    x1, x2 = sorted((dequantize_coord(bx1, img_w, vocab.bins), dequantize_coord(bx2, img_w, vocab.bins)))
    y1, y2 = sorted((dequantize_coord(by1, img_h, vocab.bins), dequantize_coord(by2, img_h, vocab.bins)))
    return TextInstance(x1, y1, x2, y2, bytes(cur.text).decode("utf-8", errors="replace"))


# ----------------------------------------------------------------------------
# Prompts
# ----------------------------------------------------------------------------

TEMPLATES = {
    "spotting": "Detect and recognize text in image",
    "doc_parse": "Convert the textual content of the image into markdown.",
    "chart_parse": "Convert the chart of the image into {format}",
    "kie": "What is the value of the {key}?",
    "translation": "Translate the text in the image into {language}.",
    "translation_detect": "Detect and translate the text in the image into {language}.",
    "translation_spot": "Detect, recognize, and translate the text in the image into {language}.",
}
# tasks whose prompt is the sample's own question / text, unchanged
PASSTHROUGH = {"doc_vqa": "question", "table_qa": "question", "pure_text": "text"}
TASKS = ("spotting", "doc_parse", "chart_parse", "kie", "doc_vqa", "table_qa", "translation", "pure_text")

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


def build_prompt(task: str, params: dict | None = None) -> str:
    params = params or {}
    if task in PASSTHROUGH:
        key = PASSTHROUGH[task]
        if key not in params:
            raise TemplateError(f"task {task!r} needs parameter {key!r}")
        return params[key]
    if task == "translation" and params.get("mode", "line") != "line":
        task = {"detect": "translation_detect", "spot": "translation_spot"}.get(params["mode"], "")
    if task not in TEMPLATES:
        raise TemplateError(f"unknown task {task!r}")

    def sub(m):
        if m.group(1) not in params:
            raise TemplateError(f"template for {task!r} needs {{{m.group(1)}}}")
        return str(params[m.group(1)])

    return _PLACEHOLDER.sub(sub, TEMPLATES[task])
