"""Checkpoints, dataset loading, and run configuration files."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .head import Box, InvalidBoxError
from .numeric import ParamStore
from .synthgen import FORMAT_VERSION, GRAMMAR_VERSION, GroundingSample, RegionProposal

MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class DatasetError(ValueError):
    pass


class DatasetVersionError(DatasetError):
    pass


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: ParamStore, metadata: dict, path) -> None:
    """Write ``params`` and ``metadata`` atomically (temp file + rename).

    Layout, little-endian: b"LFCK", u32 version, u32 metadata length, metadata
    JSON, u64 entry count, then per entry: u32 name length, name, u32 rank,
    rank x u64 dims, raw float64 values.  Entries are in lexicographic order.
    """
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta,
             struct.pack("<Q", len(params))]
    for name in sorted(params.entries):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if len(buf) < 4:
        raise CorruptCheckpointError(f"{path}: file too short ({len(buf)} bytes)")
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, meta_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata ({exc})") from exc
    (count,) = r.unpack("<Q")
    entries = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape)) if rank else 1
        entries[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return ParamStore(entries, int(metadata.get("seed", 0))), metadata


# ------------------------------------------------------------------- datasets

def _sample_from_record(rec: dict, header: dict, where: str) -> GroundingSample:
    vocab_size = len(header["vocab"])
    F = len(header["spec"]["categories"]) + len(header["spec"]["colors"])
    try:
        if rec.get("grammar_version") != header["grammar_version"]:
            raise DatasetVersionError(f"{where}: grammar_version {rec.get('grammar_version')} "
                                      f"differs from header {header['grammar_version']}")
        regions = []
        for j, reg in enumerate(rec["regions"]):
            try:
                box = Box.from_list(reg["box"])
            except InvalidBoxError as exc:
                raise DatasetError(f"{where}: region {j}: {exc}") from None
            feats = np.asarray(reg["features"], dtype=np.float64)
            if feats.shape != (F,) or not np.all(np.isfinite(feats)):
                raise DatasetError(f"{where}: region {j}: features must be {F} finite numbers")
            regions.append(RegionProposal(box, feats, reg.get("category"), reg.get("color")))
        if not regions:
            raise DatasetError(f"{where}: sample has no regions")
        tokens = [int(t) for t in rec["tokens"]]
        if not tokens:
            raise DatasetError(f"{where}: empty command")
        bad = [t for t in tokens if not 0 <= t < vocab_size]
        if bad:
            raise DatasetError(f"{where}: token ids {bad} outside vocabulary of {vocab_size}")
        target = int(rec["target_index"])
        if not 0 <= target < len(regions):
            raise DatasetError(f"{where}: target_index {target} outside [0, {len(regions)})")
        return GroundingSample(int(rec["id"]), regions, tokens, target, int(rec["seed"]),
                               int(rec["grammar_version"]))
    except KeyError as exc:
        raise DatasetError(f"{where}: missing field {exc}") from None


def load_dataset(path) -> tuple[dict, list[GroundingSample]]:
    """Read a generated dataset, validating every record. Returns ``(header, samples)``."""
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file (no header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:1: header is not JSON ({exc})") from None
    for key in ("format_version", "grammar_version", "vocab", "templates", "spec"):
        if key not in header:
            raise DatasetError(f"{path}:1: header missing {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}:1: format_version {header['format_version']} "
                                  f"not supported (expected {FORMAT_VERSION})")
    if header["grammar_version"] != GRAMMAR_VERSION:
        raise DatasetVersionError(f"{path}:1: grammar_version {header['grammar_version']} "
                                  f"not supported (expected {GRAMMAR_VERSION})")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{where}: not JSON ({exc})") from None
        samples.append(_sample_from_record(rec, header, where))
    return header, samples


# ---------------------------------------------------------------- run config

@dataclass
class DataSection:
    train: str = ""
    val: str = ""
    test: str = ""


@dataclass
class EncoderSection:
    d: int = 64
    L: int = 4
    heads: int = 4
    ffn_mult: int = 4
    max_tokens: int = 16
    stream: str = "single"
    dual_split: str = ""


@dataclass
class FusionSection:
    kind: str = "RSD"
    routing_iterations: int = 3


@dataclass
class OptimSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 32


@dataclass
class RunConfig:
    """Everything a training run depends on. Keys are ``section.name``."""

    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    seed: int = 0
    out_dir: str = "runs/default"

    @staticmethod
    def keys() -> list[tuple[str, type]]:
        out = []
        for f in fields(RunConfig):
            default = getattr(RunConfig(), f.name)
            if hasattr(default, "__dataclass_fields__"):
                out += [(f"{f.name}.{g.name}", type(getattr(default, g.name))) for g in fields(default)]
            else:
                out.append((f.name, type(default)))
        return out

    def set(self, key: str, value) -> None:
        types = dict(self.keys())
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            value = kind(value) if kind is not int else int(str(value), 0)
        except ValueError:
            raise ValueError(f"config key {key}: cannot parse {value!r} as {kind.__name__}") from None
        target = self
        *path, last = key.split(".")
        for part in path:
            target = getattr(target, part)
        setattr(target, last, value)

    def get(self, key: str):
        target = self
        for part in key.split("."):
            target = getattr(target, part)
        return target

    def as_dict(self) -> dict:
        return {k: self.get(k) for k, _ in self.keys()}

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())

    def validate(self) -> None:
        from .encoder import EncoderConfig
        from .fusion import FusionKind

        FusionKind.parse(self.fusion.kind)
        EncoderConfig(d=self.encoder.d, L=self.encoder.L, heads=self.encoder.heads,
                      ffn_mult=self.encoder.ffn_mult, max_tokens=self.encoder.max_tokens,
                      stream=self.encoder.stream, dual_split=parse_split(self.encoder.dual_split))
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ValueError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.fusion.routing_iterations < 1:
            raise ValueError("fusion.routing_iterations must be >= 1")
        if not self.seed >= 0:
            raise ValueError("seed must be non-negative")


def parse_split(text: str):
    text = text.strip()
    if not text:
        return None
    parts = [int(p) for p in text.replace(" ", "").split(",")]
    if len(parts) != 3:
        raise ValueError(f"dual_split needs three comma-separated counts, got {text!r}")
    return tuple(parts)


def parse_config_text(text: str, config: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments allowed) on top of ``config``."""
    config = config or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            config.set(key, value)
        except KeyError as exc:
            raise ValueError(f"config line {lineno}: {exc.args[0]}") from None
    return config


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
