"""Command line: synth | train | infer | eval | inspect.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from collections import Counter
from pathlib import Path

import numpy as np

from textrich.checkpoint import (
    canonical_json, load_into, optimizer_state, read_checkpoint, save_checkpoint, tensor_stats,
)
from textrich.codec import TASKS, build_prompt, decode_text, parse_instances
from textrich.config import RunConfig, load_run_config
from textrich.dataset import load_dataset, load_image, needs_instances, write_dataset
from textrich.errors import ConfigError, DimensionError, NumericError, TemplateError, TextRichError
from textrich.evaluate import evaluate_run
from textrich.model import TextRichVLM
from textrich.synth.generators import CHART_FORMATS, generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FORMATS = {f.lower(): f for f in CHART_FORMATS}
LOG_FIELDS = ["stage", "step", "loss", "accuracy", "image_size", "lr"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.generator.seed = args.seed
    return cfg


def _parse_stages(text: str) -> list[int]:
    try:
        stages = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--stage expects a comma-separated list such as 1,2,3; got {text!r}") from None
    if not stages or any(s not in (1, 2, 3) for s in stages) or stages != sorted(set(stages)):
        raise ConfigError(f"--stage must be an increasing list drawn from 1,2,3; got {text!r}")
    return stages


# ----------------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    counts = cfg.dataset_counts()
    if args.task:
        if args.task not in TASKS:
            raise ConfigError(f"unknown task {args.task!r}; expected one of {list(TASKS)}")
        counts = {args.task: args.count if args.count is not None else sum(counts.values())}
    elif args.count is not None:
        raise ConfigError("--count requires --task")
    cfg.counts = counts
    cfg.validate()
    fmt = FORMATS[args.format] if args.format else None
    samples = generate_dataset(counts, cfg.generator, seed=cfg.seed, chart_format=fmt)
    path = write_dataset(samples, args.out, bins=cfg.generator.bins)
    per_task = Counter(s.task for s in samples)
    print("task\tcount")
    for task in counts:
        print(f"{task}\t{per_task.get(task, 0)}")
    print(f"# wrote {len(samples)} records to {path}", file=sys.stderr)
    return EXIT_OK


# ----------------------------------------------------------------------------
# train
# ----------------------------------------------------------------------------


def _append_log(path: Path, rows: list[dict]) -> None:
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_FIELDS})


def _read_log(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [{"stage": int(r["stage"]), "step": int(r["step"]), "loss": float(r["loss"])}
                for r in csv.DictReader(f)]


def cmd_train(args) -> int:
    from textrich.plotting import plot_loss
    from textrich.training import run_stage

    cfg = _run_config(args)
    stages = _parse_stages(args.stage)
    if not Path(args.data).is_file():
        raise FileNotFoundError(f"data file not found: {args.data}")
    samples = load_dataset(args.data)
    model = TextRichVLM(cfg.model_config(), seed=cfg.seed)
    lineage: list = []
    state = None
    if args.init:
        ckpt = read_checkpoint(args.init)
        load_into(model, ckpt)
        lineage = ckpt.lineage
        if stages[0] == 3:
            state = optimizer_state(ckpt, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    print("stage\tsteps\tfinal_loss\tskipped\tcheckpoint")
    for k in stages:
        stage = cfg.stage(k)
        if args.steps is not None:
            stage.steps = args.steps
        data = samples[::cfg.finetune_every] if k == 3 else samples
        result = run_stage(stage, model, data, optimizer=state if k == 3 else None, lineage=lineage)
        ckpt_path = out / f"stage{k}.ckpt"
        save_checkpoint(ckpt_path, result.checkpoint)
        _append_log(log_path, result.log)
        lineage = result.checkpoint.lineage
        state = result.optimizer
        loss = "" if result.final_loss is None else f"{result.final_loss:.6f}"
        print(f"{k}\t{stage.steps}\t{loss}\t{result.skipped}\t{ckpt_path}")
    if log_path.exists():
        rows = _read_log(log_path)
        if rows:
            plot_loss(rows, out / "loss.png")
    return EXIT_OK


# ----------------------------------------------------------------------------
# infer
# ----------------------------------------------------------------------------


def _params(args) -> dict:
    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        params[k] = v
    if args.format:
        params["format"] = FORMATS[args.format]
    return params


def _check_size(image: np.ndarray, model: TextRichVLM, where: str) -> None:
    size = model.config.encoder.input_size
    if image.shape[:2] != (size, size):
        raise DimensionError(f"{where}: image is {image.shape[1]}x{image.shape[0]} but the model expects "
                             f"{size}x{size}; resize the image first (no implicit resizing)")


def cmd_infer(args) -> int:
    from textrich.checkpoint import build_model

    if args.task is not None and args.task not in TASKS:
        raise ConfigError(f"unknown task {args.task!r}; expected one of {list(TASKS)}")
    model = build_model(read_checkpoint(args.ckpt))
    vocab = model.vocab
    if args.data:
        return _infer_dataset(args, model)
    if args.task is None:
        raise ConfigError("--task is required for single-image inference")
    image = None
    if args.image:
        image = load_image(os.path.basename(args.image), Path(args.image).parent)
        _check_size(image, model, args.image)
    elif args.task != "pure_text":
        raise ConfigError(f"task {args.task!r} needs an image")
    params = _params(args)
    prompt = build_prompt(args.task, params)
    ids = model.generate(image, prompt, max_new=args.max_new)
    print(decode_text(ids, vocab))
    if needs_instances(args.task, params) or args.task == "spotting":
        size = model.config.encoder.input_size
        found, diags = parse_instances(ids, vocab, size, size)
        print(canonical_json({"instances": [i.to_dict() for i in found],
                              "diagnostics": [{"kind": d.kind, "position": d.position} for d in diags]}))
    return EXIT_OK


def _infer_dataset(args, model: TextRichVLM) -> int:
    samples = load_dataset(args.data)
    if args.task is not None:
        samples = [s for s in samples if s.task == args.task]
    for s in samples:
        if s.image is not None:
            _check_size(s.image, model, s.id)
    outputs: dict[str, str] = {}
    # batch samples that share a prompt (and hence a prompt length)
    groups: dict[tuple, list] = {}
    for s in samples:
        groups.setdefault((s.prompt, s.image is None), []).append(s)
    for (prompt, _), group in groups.items():
        for i in range(0, len(group), args.batch_size):
            chunk = group[i:i + args.batch_size]
            images = [s.image for s in chunk]
            ids = model.generate_batch(images, [prompt] * len(chunk), max_new=args.max_new)
            for s, out in zip(chunk, ids):
                outputs[s.id] = decode_text(out, model.vocab)
    lines = [json.dumps({"id": s.id, "task": s.task, "output": outputs[s.id]}, sort_keys=True,
                        ensure_ascii=False) for s in samples]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"# wrote {len(lines)} predictions to {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval / inspect
# ----------------------------------------------------------------------------


def cmd_eval(args) -> int:
    if args.task is not None and args.task not in TASKS:
        raise ConfigError(f"unknown task {args.task!r}; expected one of {list(TASKS)}")
    for p in (args.pred, args.gt):
        if not Path(p).is_file():
            raise FileNotFoundError(f"file not found: {p}")
    report = evaluate_run(args.pred, args.gt, args.task, args.bins)
    text = json.dumps(report, sort_keys=True, indent=2)
    print(text)
    if args.out:
        from textrich.plotting import plot_metrics

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text + "\n", encoding="utf-8")
        plot_metrics(report, out / "metrics.png")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    header = ckpt.header()
    header["optimizer_moments"] = len(ckpt.moments)
    print(json.dumps(header, sort_keys=True, indent=2))
    print("name\tdtype\tshape\tmean\tstd\tmin\tmax")
    for r in tensor_stats(ckpt):
        shape = "x".join(str(d) for d in r["shape"])
        print(f"{r['name']}\t{r['dtype']}\t{shape}\t{r['mean']:.6g}\t{r['std']:.6g}\t{r['min']:.6g}\t{r['max']:.6g}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="textrich", description="Desk-scale text-rich image-to-text model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", metavar="PATH", help="run configuration (JSON)")
            sp.add_argument("--seed", type=int, help="override the configured seed")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True, metavar="PATH", help="output directory")
    sp.add_argument("--task", help="generate a single task family")
    sp.add_argument("--count", type=int, help="number of samples (with --task)")
    sp.add_argument("--format", choices=sorted(FORMATS), help="chart target format")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="run training stages")
    common(sp)
    sp.add_argument("--data", required=True, metavar="PATH", help="dataset JSONL")
    sp.add_argument("--out", required=True, metavar="PATH", help="output directory")
    sp.add_argument("--stage", default="1", metavar="LIST", help="stages to run, e.g. 1,2,3")
    sp.add_argument("--init", metavar="CKPT", help="start from this checkpoint")
    sp.add_argument("--steps", type=int, help="override the step count of every stage")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="greedy generation with a checkpoint")
    sp.add_argument("ckpt", help="checkpoint file")
    sp.add_argument("image", nargs="?", help="PPM/PGM image")
    sp.add_argument("--task", help=f"one of {', '.join(TASKS)}")
    sp.add_argument("--param", action="append", metavar="KEY=VALUE", help="prompt parameter (repeatable)")
    sp.add_argument("--format", choices=sorted(FORMATS), help="chart target format")
    sp.add_argument("--data", metavar="PATH", help="run over every record of a dataset JSONL")
    sp.add_argument("--out", metavar="PATH", help="prediction JSONL (with --data)")
    sp.add_argument("--max-new", type=int, default=256)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("pred", help="prediction JSONL")
    sp.add_argument("gt", help="ground-truth JSONL")
    sp.add_argument("--task", help="restrict to one task")
    sp.add_argument("--bins", type=int, help="coordinate bins (default: from the records)")
    sp.add_argument("--out", metavar="PATH", help="directory for report.json and metrics.png")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="print checkpoint header and tensor statistics")
    sp.add_argument("ckpt")
    sp.set_defaults(func=cmd_inspect)
    return p


def _thread_limit():
    n = os.environ.get("STXV3_THREADS")
    if not n:
        return None
    if not n.isdigit() or int(n) < 1:
        raise ConfigError(f"STXV3_THREADS must be a positive integer, got {n!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    limiter = None
    try:
        limiter = _thread_limit()
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, TemplateError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TextRichError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
