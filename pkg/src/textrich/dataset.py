"""JSONL dataset files with PPM/PGM images stored next to them."""

from __future__ import annotations

import base64
import json
import os
from pathlib import Path

from textrich.codec import TASKS, TextInstance
from textrich.errors import ConfigError, EncodingError
from textrich.synth.generators import Sample
from textrich.synth.imageio import decode_pnm, write_pnm

INSTANCE_MODES = ("detect", "spot")


def needs_instances(task: str, params: dict) -> bool:
    return task == "spotting" or (task == "translation" and params.get("mode") in INSTANCE_MODES)


def sample_record(sample: Sample, image_path: str | None, bins: int) -> dict:
    rec = {"id": sample.id, "task": sample.task, "prompt": sample.prompt, "target": sample.target,
           "params": sample.params, "bins": bins}
    if image_path is not None:
        h, w = sample.image.shape[:2]
        rec.update(image=image_path, width=w, height=h)
    if needs_instances(sample.task, sample.params):
        rec["instances"] = [i.to_dict() for i in sample.instances]
    return rec


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_dataset(samples: list[Sample], out_dir, bins: int = 1000, name: str = "data.jsonl") -> Path:
    """Write ``out_dir/name`` and ``out_dir/images/<id>.ppm``; returns the JSONL path."""
    out = Path(out_dir)
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids must be unique")
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = None
        if s.image is not None:
            rel = f"images/{s.id}.ppm"
            write_pnm(out / rel, s.image)
        lines.append(dumps_record(sample_record(s, rel, bins)))
    path = out / name
    tmp = path.with_suffix(".tmp")
    tmp.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_image(ref: str, base: Path):
    if ref.startswith("base64:"):
        return decode_pnm(base64.b64decode(ref[len("base64:"):]))
    with open(base / ref, "rb") as f:
        data = f.read()
    try:
        return decode_pnm(data)
    except ValueError as exc:
        raise EncodingError(f"{base / ref}: {exc}") from None


def record_sample(rec: dict, base: Path) -> Sample:
    for key in ("id", "task", "prompt", "target"):
        if not isinstance(rec.get(key), str):
            raise EncodingError(f"record missing string field {key!r}")
    if rec["task"] not in TASKS:
        raise EncodingError(f"record {rec['id']}: unknown task {rec['task']!r}")
    image = load_image(rec["image"], base) if rec.get("image") else None
    instances = [TextInstance.from_dict(d) for d in rec["instances"]] if rec.get("instances") else None
    return Sample(rec["id"], rec["task"], rec["prompt"], rec["target"], image, instances, rec.get("params", {}))


def load_dataset(path) -> list[Sample]:
    """Samples of a JSONL dataset; image paths are relative to the file's directory."""
    path = Path(path)
    base = path.parent
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EncodingError(f"{path}:{n}: {exc}") from None
            out.append(record_sample(rec, base))
    return out
