"""Three-stage training: spotting pre-training, multi-task pre-training, fine-tuning."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from textrich import tensor as T
from textrich.checkpoint import Checkpoint, checkpoint_from_model
from textrich.codec import TASKS
from textrich.errors import ConfigError, DegenerateBatchError, NumericError
from textrich.model import build_sequence
from textrich.optim import AdamState, adam_step

IMAGE_TASKS = tuple(t for t in TASKS if t != "pure_text")
FINETUNE_STEPS = 2000


@dataclass
class MixtureSpec:
    weights: dict = field(default_factory=lambda: {t: 1.0 for t in IMAGE_TASKS})
    pure_text_ratio: float = 0.1

    def validate(self) -> None:
        if any(w < 0 for w in self.weights.values()) or not any(w > 0 for w in self.weights.values()):
            raise ConfigError("mixture weights must be nonnegative with at least one positive")
        unknown = set(self.weights) - set(IMAGE_TASKS)
        if unknown:
            raise ConfigError(f"unknown tasks in mixture: {sorted(unknown)}")
        if not 0 <= self.pure_text_ratio < 1:
            raise ConfigError(f"pure-text ratio must be in [0, 1), got {self.pure_text_ratio}")

    def counts(self, total: int) -> dict:
        """Split ``total`` image samples across tasks in proportion to the weights."""
        pos = {t: w for t, w in self.weights.items() if w > 0}
        s = sum(pos.values())
        raw = {t: total * w / s for t, w in pos.items()}
        out = {t: int(math.floor(v)) for t, v in raw.items()}
        # hand out the remainder by largest fractional part, ties by task order
        rest = total - sum(out.values())
        for t in sorted(raw, key=lambda t: (-(raw[t] - out[t]), IMAGE_TASKS.index(t)))[:rest]:
            out[t] += 1
        return out


@dataclass
class StageConfig:
    stage: int
    tasks: tuple
    steps: int
    batch_size: int = 8
    lr: float = 1e-3
    image_size: int = 64
    small_size: int | None = None
    switch_fraction: float = 0.5
    max_seq: int = 512
    pure_text_ratio: float = 0.0
    warmup_fraction: float = 0.05
    log_every: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.stage == 1 and tuple(self.tasks) != ("spotting",):
            raise ConfigError("stage 1 trains the spotting task only")
        if self.stage != 1 and self.small_size is not None:
            raise ConfigError("only stage 1 uses a resolution schedule")
        if set(self.tasks) - set(IMAGE_TASKS):
            raise ConfigError(f"unknown tasks {sorted(set(self.tasks) - set(IMAGE_TASKS))}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("steps >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 <= self.pure_text_ratio < 1:
            raise ConfigError(f"pure-text ratio must be in [0, 1), got {self.pure_text_ratio}")
        if not 0 <= self.switch_fraction <= 1 or not 0 <= self.warmup_fraction <= 1:
            raise ConfigError("fractions must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        d["tasks"] = tuple(d.get("tasks", ()))
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg


def default_stage(stage: int, steps: int | None = None, desk_factor: float = 0.1, **overrides) -> StageConfig:
    """Desk defaults: stage 1 spotting at 32 -> 64 px; stages 2-3 all families at 64 px."""
    if stage == 1:
        cfg = StageConfig(1, ("spotting",), 2000 if steps is None else steps, small_size=32)
    elif stage == 2:
        cfg = StageConfig(2, IMAGE_TASKS, 2000 if steps is None else steps, pure_text_ratio=0.1)
    elif stage == 3:
        n = round(FINETUNE_STEPS * desk_factor) if steps is None else steps
        cfg = StageConfig(3, IMAGE_TASKS, n, pure_text_ratio=0.1)
    else:
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ConfigError(f"unknown stage field {k!r}")
        setattr(cfg, k, tuple(v) if k == "tasks" else v)
    cfg.validate()
    return cfg


# Documentation only: the full-scale stage-1 schedule.
FULL_STAGE1 = StageConfig(1, ("spotting",), 100_000, image_size=1600, small_size=960, max_seq=4096)


def resolution_schedule(step: int, stage: StageConfig) -> int:
    """Stage 1 trains at ``small_size`` for the first ``switch_fraction`` of steps."""
    if stage.stage == 1 and stage.small_size is not None and step < stage.switch_fraction * stage.steps:
        return stage.small_size
    return stage.image_size


def finetune_steps(desk_factor: float) -> int:
    return round(FINETUNE_STEPS * desk_factor)


# ----------------------------------------------------------------------------
# Sample streams
# ----------------------------------------------------------------------------


def sample_stream(samples: list, seed: int) -> Iterator:
    """Endless epochs over ``samples``, each in a fresh seeded permutation."""
    if not samples:
        raise DegenerateBatchError("cannot stream an empty sample pool")
    rng = np.random.default_rng(seed)
    while True:
        for i in rng.permutation(len(samples)):
            yield samples[int(i)]


def mix_batches(image_text_stream: Iterator, pure_text_stream: Iterator | None, ratio: float, seed: int,
                batch_size: int) -> Iterator[list]:
    """Fill each batch slot from the pure-text stream with probability ``ratio``."""
    if not 0 <= ratio < 1:
        raise ConfigError(f"pure-text ratio must be in [0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    while True:
        batch = []
        for _ in range(batch_size):
            draw = rng.random()
            if pure_text_stream is not None and draw < ratio:
                batch.append(next(pure_text_stream))
            else:
                batch.append(next(image_text_stream))
        yield batch


# ----------------------------------------------------------------------------
# Stage runner
# ----------------------------------------------------------------------------


@dataclass
class StageResult:
    checkpoint: Checkpoint
    optimizer: AdamState
    log: list = field(default_factory=list)  # dicts: stage, step, loss, accuracy, image_size, lr
    skipped: int = 0
    touched: dict = field(default_factory=dict)  # parameter name -> received a nonzero gradient

    @property
    def final_loss(self) -> float | None:
        return self.log[-1]["loss"] if self.log else None


def fits(model, sample, max_seq: int) -> bool:
    ids, _ = build_sequence(sample.prompt, sample.target_ids(model.vocab), model.vocab)
    prefix = 2 * model.config.sampler.queries_per_stage if sample.image is not None else 0
    return prefix + len(ids) - 1 <= min(max_seq, model.config.decoder.max_seq)


def run_stage(stage: StageConfig, model, data: list, optimizer: AdamState | None = None,
              lineage: list | None = None, on_log: Callable[[dict], None] | None = None) -> StageResult:
    """Train ``model`` in place for ``stage.steps`` steps on ``data``.

    Samples of other tasks are ignored; pure-text samples are mixed in at the
    stage's ratio.  Sequences longer than the stage allows are skipped with a
    warning.
    """
    stage.validate()
    state = optimizer if optimizer is not None else AdamState(lr=stage.lr)
    image_pool = [s for s in data if s.task in stage.tasks and s.image is not None]
    text_pool = [s for s in data if s.task == "pure_text"] if stage.pure_text_ratio > 0 else []
    kept_image = [s for s in image_pool if fits(model, s, stage.max_seq)]
    kept_text = [s for s in text_pool if fits(model, s, stage.max_seq)]
    skipped = len(image_pool) - len(kept_image) + len(text_pool) - len(kept_text)
    if skipped:
        warnings.warn(f"stage {stage.stage}: skipped {skipped} samples exceeding the sequence limit")
    named = list(model.named_parameters())
    params = [p for _, p in named]
    touched = {name: False for name, _ in named}
    log: list[dict] = []
    if stage.steps > 0:
        if not kept_image:
            raise DegenerateBatchError(f"stage {stage.stage} has no usable samples for tasks {stage.tasks}")
        batches = mix_batches(sample_stream(kept_image, stage.seed),
                              sample_stream(kept_text, stage.seed + 1) if kept_text else None,
                              stage.pure_text_ratio if kept_text else 0.0, stage.seed + 2, stage.batch_size)
        warmup = max(1, int(round(stage.warmup_fraction * stage.steps)))
        for step in range(stage.steps):
            size = resolution_schedule(step, stage)
            batch = next(batches)
            state.lr = stage.lr * min(1.0, (step + 1) / warmup)
            model.zero_grad()
            loss, n_tok, n_correct = model.batch_loss(batch, size)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"stage {stage.stage}: non-finite loss {value} at step {step}")
            T.backward(loss)
            grads = [p.grad for p in params]
            for (name, _), g in zip(named, grads):
                if not touched[name] and g is not None and np.any(g != 0):
                    touched[name] = True
            adam_step(params, grads, state)
            if step % stage.log_every == 0 or step == stage.steps - 1:
                entry = {"stage": stage.stage, "step": step, "loss": value,
                         "accuracy": n_correct / n_tok, "image_size": size, "lr": state.lr}
                log.append(entry)
                if on_log is not None:
                    on_log(entry)
    record = {"stage": stage.stage, "steps": stage.steps, "tasks": list(stage.tasks), "seed": stage.seed}
    ckpt = checkpoint_from_model(model, step=stage.steps, optimizer=state,
                                 lineage=list(lineage or []) + [record],
                                 extra={"stage": stage.to_dict(),
                                        "final_loss": log[-1]["loss"] if log else None})
    return StageResult(ckpt, state, log, skipped, touched)


def finetune(model, benchmark_data: list, stage2: StageConfig, desk_factor: float = 0.1,
             optimizer: AdamState | None = None, lineage: list | None = None,
             on_log: Callable[[dict], None] | None = None) -> StageResult:
    """Stage 3: the stage-2 recipe continued for ``2000 * desk_factor`` steps on a chosen subset."""
    cfg = StageConfig(**{**stage2.to_dict(), "stage": 3, "tasks": tuple(stage2.tasks),
                         "steps": finetune_steps(desk_factor)})
    return run_stage(cfg, model, benchmark_data, optimizer, lineage, on_log)


def teacher_forced_accuracy(model, samples: list, image_size: int | None = None, batch_size: int = 16) -> float:
    """Fraction of response tokens predicted correctly under teacher forcing."""
    n_tok = n_correct = 0
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            _, n, c = model.batch_loss(samples[i:i + batch_size], image_size)
            n_tok += n
            n_correct += c
    return n_correct / n_tok if n_tok else 0.0
