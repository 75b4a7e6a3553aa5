"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"STXV3" | u32 version | u64 config length | config (canonical JSON)
    | u32 tensor count
    | per tensor: u32 name length, name (UTF-8), u8 dtype code, u8 rank, rank x u64 dims, raw data
    | u32 CRC32 of every preceding byte

Optimizer moments are stored as ordinary tensors named ``optim.m.<param>`` and
``optim.v.<param>``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from textrich.errors import CompatibilityError, IntegrityError
from textrich.optim import AdamState

MAGIC = b"STXV3"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict  # name -> ndarray, parameters only
    step: int = 0
    optimizer: dict | None = None  # hyperparameters + t; moments in ``moments``
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    rng_state: dict | None = None
    lineage: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {"model": self.model_config, "step": self.step, "optimizer": self.optimizer,
                "rng": self.rng_state, "lineage": self.lineage, "extra": self.extra}


def checkpoint_from_model(model, step: int = 0, optimizer: AdamState | None = None, rng=None,
                          lineage: list | None = None, extra: dict | None = None) -> Checkpoint:
    named = list(model.named_parameters())
    opt = moments = None
    if optimizer is not None:
        opt = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
               "eps": optimizer.eps, "t": optimizer.t}
        if optimizer.m:
            moments = {name: (m, v) for (name, _), m, v in zip(named, optimizer.m, optimizer.v)}
    return Checkpoint(
        model_config=model.config.to_dict(),
        tensors={name: p.data for name, p in named},
        step=step, optimizer=opt, moments=moments or {},
        rng_state=None if rng is None else rng.bit_generator.state,
        lineage=list(lineage or []), extra=dict(extra or {}),
    )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blob = canonical_json(ckpt.header()).encode("utf-8")
    tensors = dict(ckpt.tensors)
    for name, (m, v) in ckpt.moments.items():
        tensors[f"optim.m.{name}"] = m
        tensors[f"optim.v.{name}"] = v
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise CompatibilityError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise IntegrityError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint checksum mismatch (corrupt or truncated)")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, blob_len = r.unpack("<IQ")
    if version != VERSION:
        raise CompatibilityError(f"checkpoint format version {version}, expected {VERSION}")
    try:
        header = json.loads(r.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"bad config block: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise IntegrityError(f"tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise IntegrityError("trailing bytes after tensor table")
    params = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    moments = {k[len("optim.m."):]: (v, tensors[f"optim.v.{k[len('optim.m.'):]}"])
               for k, v in tensors.items() if k.startswith("optim.m.")}
    return Checkpoint(header["model"], params, header["step"], header["optimizer"], moments,
                      header["rng"], header["lineage"], header["extra"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a crash never leaves a half-written file at ``path``."""
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def _config_mismatch(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _config_mismatch(va, vb, f"{prefix}{k}.")
        elif va != vb:
            out.append(f"{prefix}{k}: {va!r} != {vb!r}")
    return out


def load_into(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into ``model``; configs must agree exactly."""
    diff = _config_mismatch(model.config.to_dict(), ckpt.model_config)
    if diff:
        raise CompatibilityError("checkpoint config differs from model: " + "; ".join(diff[:5]))
    own = dict(model.named_parameters())
    if set(own) != set(ckpt.tensors):
        raise CompatibilityError("checkpoint parameter names differ from model")
    for name, p in own.items():
        if ckpt.tensors[name].shape != p.shape or ckpt.tensors[name].dtype != p.dtype:
            raise CompatibilityError(f"{name}: {ckpt.tensors[name].dtype}{ckpt.tensors[name].shape} "
                                     f"!= {p.dtype}{p.shape}")
    for name, p in own.items():
        p.data = ckpt.tensors[name].copy()


def build_model(ckpt: Checkpoint):
    """Instantiate a model from the embedded config and load the parameters."""
    from textrich.model import ModelConfig, TextRichVLM

    dtypes = {a.dtype for a in ckpt.tensors.values()}
    model = TextRichVLM(ModelConfig.from_dict(ckpt.model_config), dtype=dtypes.pop() if dtypes else np.float32)
    load_into(model, ckpt)
    return model


def load_checkpoint(path, model=None):
    """Read ``path`` and return a model carrying its weights (``model`` is filled if given)."""
    ckpt = read_checkpoint(path)
    if model is None:
        return build_model(ckpt)
    load_into(model, ckpt)
    return model


def optimizer_state(ckpt: Checkpoint, model) -> AdamState | None:
    if ckpt.optimizer is None:
        return None
    o = ckpt.optimizer
    state = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], t=o["t"])
    if ckpt.moments:
        names = [n for n, _ in model.named_parameters()]
        state.m = [ckpt.moments[n][0].copy() for n in names]
        state.v = [ckpt.moments[n][1].copy() for n in names]
    return state


def tensor_stats(ckpt: Checkpoint) -> list[dict]:
    """Per-tensor summary used by ``inspect``."""
    rows = []
    for name, arr in ckpt.tensors.items():
        a = arr.astype(np.float64)
        rows.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                     "mean": float(a.mean()) if a.size else 0.0, "std": float(a.std()) if a.size else 0.0,
                     "min": float(a.min()) if a.size else 0.0, "max": float(a.max()) if a.size else 0.0})
    return rows
