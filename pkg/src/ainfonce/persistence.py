"""Run configuration files, binary checkpoints and CSV outputs.

Config files are JSON objects with the sections of :class:`RunConfig`.
Unknown keys are rejected; missing keys take their documented defaults.

Checkpoint layout (all little-endian)::

    b"AINC" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dim * rank
                | f64 values, row-major
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig
from .data import AugmentPolicy, Dataset, default_blobs, load_csv_dataset
from .encoder import EncoderDims, LinearClassifier, MlpEncoder, Model
from .losses import LossConfig
from .train_eval import AnnealConfig, FinetuneConfig, TrainConfig

log = logging.getLogger(__name__)

MAGIC = b"AINC"
VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class DataConfig:
    classes: int = 10
    dim: int = 32
    n_train: int = 200
    n_test: int = 50
    spread: float = 0.15
    train_csv: str | None = None
    test_csv: str | None = None


@dataclass
class EncoderConfig:
    hidden: tuple[int, ...] = (128, 128)
    k: int = 32


@dataclass
class TrainSection:
    loss_kind: str = "ip"
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9


@dataclass
class FinetuneSection:
    mode: str = "LP"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossConfig = field(default_factory=LossConfig)
    anneal: AnnealConfig = field(default_factory=AnnealConfig)
    attack: AttackConfig = field(default_factory=AttackConfig.pretrain_default)
    eval_attack: AttackConfig = field(default_factory=AttackConfig.eval_default)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.loss_kind, t.epochs, t.batch_size, t.lr, t.momentum, self.seed,
                           self.encoder.hidden, self.encoder.k, self.loss, self.anneal,
                           self.attack, self.augment)

    def finetune_config(self) -> FinetuneConfig:
        f = self.finetune
        return FinetuneConfig(f.epochs, f.batch_size, f.lr, f.momentum, self.seed,
                              self.eval_attack)

    def datasets(self) -> tuple[Dataset, Dataset]:
        d = self.data
        if d.train_csv or d.test_csv:
            if not (d.train_csv and d.test_csv):
                raise ConfigError("data.train_csv and data.test_csv must be given together")
            return load_csv_dataset(d.train_csv, "train"), load_csv_dataset(d.test_csv, "test")
        return default_blobs(self.seed, d.classes, d.dim, d.n_train, d.n_test, d.spread)


# step sizes follow epsilon when only epsilon is given
_STEP_RATIO = {"attack": 4.0, "eval_attack": 10.0}


def _coerce(cur, value, key):
    if isinstance(cur, bool):
        ok = isinstance(value, bool)
    elif isinstance(cur, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(cur, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(cur, tuple):
        ok = isinstance(value, list)
        value = tuple(value) if ok else value
    elif cur is None or isinstance(cur, str):
        ok = value is None or isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: bad value {value!r}")
    return value


def _build(default, raw, where: str):
    """Override the dataclass instance ``default`` with the keys in ``raw``."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(raw).__name__}")
    names = [f.name for f in dataclasses.fields(default) if not f.name.startswith("_")]
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    updates = {}
    for name in names:
        key = f"{where}.{name}" if where else name
        cur = getattr(default, name)
        if name not in raw:
            if isinstance(default, AttackConfig) and name == "step_size" and "epsilon" in raw:
                ratio = _STEP_RATIO.get(where, 4.0)
                updates[name] = float(raw["epsilon"]) / ratio
                log.info("config: %s not set, using epsilon/%g", key, ratio)
            else:
                log.info("config: %s not set, using default %r", key, cur)
            continue
        if dataclasses.is_dataclass(cur):
            updates[name] = _build(cur, raw[name], key)
        else:
            updates[name] = _coerce(cur, raw[name], key)
    try:
        return dataclasses.replace(default, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def parse_config(raw: dict) -> RunConfig:
    return _build(RunConfig(), raw, "")


def config_to_dict(cfg: RunConfig) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)
                    if not f.name.startswith("_")}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(cfg)


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf-8")


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def _tensors_of(obj) -> list[tuple[str, np.ndarray]]:
    if isinstance(obj, Model):
        enc, clf = obj.encoder, obj.classifier
    elif isinstance(obj, MlpEncoder):
        enc, clf = obj, None
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    out = [(n, enc.params[n]) for n in enc.names]
    if clf is not None:
        out += [("clf.W", clf.W), ("clf.b", clf.b)]
    return out


def checkpoint_bytes(obj) -> bytes:
    tensors = _tensors_of(obj)
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors:
        enc_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(enc_name)) + enc_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save_checkpoint(obj, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(obj))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1, f"rank of {name}"))
        if rank > 2:
            raise CheckpointError(f"tensor {name}: rank {rank} exceeds 2")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        remaining = len(buf) - r.pos
        if size * 8 > remaining:
            raise CheckpointError(f"tensor {name}: dims {dims} need {size * 8} bytes, "
                                  f"only {remaining} left")
        vals = np.frombuffer(r.take(8 * size, f"values of {name}"), dtype="<f8")
        tensors[name] = vals.astype(np.float64).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return tensors


def load_checkpoint(path):
    """Return an :class:`MlpEncoder`, or a :class:`Model` when a head is stored."""
    tensors = parse_checkpoint(Path(path).read_bytes())
    n_layers = 0
    while f"backbone.{n_layers}.W" in tensors:
        n_layers += 1
    try:
        hidden = tuple(tensors[f"backbone.{i}.W"].shape[0] for i in range(n_layers))
        dims = EncoderDims(tensors["backbone.0.W"].shape[1], hidden, hidden[-1],
                           tensors["proj.W"].shape[0])
    except (KeyError, IndexError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not describe an encoder ({exc})") from None
    enc = MlpEncoder(dims, {n: tensors[n] for n in MlpEncoder(dims).names})
    if "clf.W" in tensors:
        return Model(enc, LinearClassifier(tensors["clf.W"], tensors["clf.b"]))
    return enc


# ---------------------------------------------------------------------------
# CSV


def provenance_line(cfg: RunConfig, seed: int | None = None) -> str:
    seed = cfg.seed if seed is None else seed
    return f"# config_sha256={config_hash(cfg)} seed={seed}\n"


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


class CsvWriter:
    """CSV with a provenance comment line; flushes after every row."""

    def __init__(self, path, columns, cfg: RunConfig, seed: int | None = None):
        self.columns = tuple(columns)
        self.fh = Path(path).open("w", encoding="utf-8", newline="")
        self.fh.write(provenance_line(cfg, seed))
        self.fh.write(",".join(self.columns) + "\n")
        self.fh.flush()

    def write(self, row: dict):
        self.fh.write(",".join(fmt(row[c]) for c in self.columns) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path) -> tuple[str, list[dict]]:
    """Return ``(provenance comment, rows)`` with numeric fields as floats."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    comment = lines[0] if lines and lines[0].startswith("#") else ""
    body = lines[1:] if comment else lines
    header = body[0].split(",")
    rows = [dict(zip(header, (float(v) for v in line.split(",")))) for line in body[1:] if line]
    return comment, rows
