"""Checkpoint I/O in the safetensors container format, plus role classification.

A safetensors file is an 8-byte little-endian header length, a UTF-8 JSON
header mapping tensor names to ``{dtype, shape, data_offsets}``, then one
contiguous byte buffer. Stores opened here read tensors lazily with
positional reads, so several threads can share one handle.
"""

from __future__ import annotations

import enum
import fnmatch
import json
import math
import os
import re
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from stfmerge import kernels
from stfmerge.errors import ConfigError, DtypeError, FormatError, SchemaError, ShapeError, StoreIOError

# safetensors dtype tag -> numpy dtype of the stored buffer.
# BF16 has no numpy type and is carried as raw uint16 bit patterns.
STORAGE_DTYPES = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
}

_HEADER_LIMIT = 100 * 1024 * 1024


@dataclass(frozen=True)
class TensorRecord:
    """One named tensor.

    ``data`` holds the array in its storage dtype; for ``BF16`` that is the
    raw ``uint16`` bit pattern. Use :meth:`as_float32` for arithmetic.
    """

    name: str
    shape: tuple[int, ...]
    dtype: str
    data: np.ndarray

    def __post_init__(self):
        if not self.name:
            raise FormatError("tensor name must be non-empty")
        if self.dtype not in STORAGE_DTYPES:
            raise DtypeError(f"unsupported dtype {self.dtype!r}", tensor=self.name)
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        if self.data.size != math.prod(shape):
            raise ShapeError(
                f"element count {self.data.size} does not match shape {shape}", tensor=self.name
            )

    @classmethod
    def from_array(cls, name: str, array, dtype: str = "F32") -> "TensorRecord":
        """Build a record from a float array, converting to ``dtype``."""
        arr = np.asarray(array)
        if dtype == "BF16":
            data = kernels.f32_to_bf16(arr.astype(np.float32, copy=False))
        elif dtype in STORAGE_DTYPES:
            data = np.ascontiguousarray(arr, dtype=STORAGE_DTYPES[dtype])
        else:
            raise DtypeError(f"unsupported dtype {dtype!r}", tensor=name)
        return cls(name, arr.shape, dtype, data.reshape(arr.shape))

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * STORAGE_DTYPES[self.dtype].itemsize

    def as_float32(self) -> np.ndarray:
        """Values widened to float32 (exact for F16 and BF16)."""
        if self.dtype == "F32":
            return self.data.reshape(self.shape)
        if self.dtype == "BF16":
            return kernels.bf16_to_f32(self.data).reshape(self.shape)
        return self.data.astype(np.float32).reshape(self.shape)


@dataclass(frozen=True)
class _Entry:
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int


class CheckpointStore:
    """Read-only handle on a safetensors file. Tensor data is read on demand."""

    def __init__(self, path, entries: Mapping[str, _Entry], data_start: int, metadata: dict):
        self.path = os.fspath(path)
        self._entries = dict(entries)
        self._data_start = data_start
        self.metadata = metadata
        self._lock = threading.Lock()
        self._fh = open(self.path, "rb")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"CheckpointStore({self.path!r}, {len(self._entries)} tensors)"

    def names(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._entry(name).shape

    def dtype(self, name: str) -> str:
        return self._entry(name).dtype

    def _entry(self, name: str) -> _Entry:
        try:
            return self._entries[name]
        except KeyError:
            raise SchemaError("tensor not present in checkpoint", tensor=name) from None

    def read_raw(self, name: str) -> TensorRecord:
        """Tensor in its stored dtype, bit-for-bit as on disk."""
        e = self._entry(name)
        buf = bytearray(e.end - e.begin)
        offset = self._data_start + e.begin
        try:
            if hasattr(os, "preadv"):
                got = os.preadv(self._fh.fileno(), [buf], offset)
            else:
                with self._lock:
                    self._fh.seek(offset)
                    got = self._fh.readinto(buf)
        except OSError as exc:
            raise StoreIOError(str(exc), tensor=name) from exc
        if got != len(buf):
            raise FormatError("tensor data truncated", tensor=name)
        data = np.frombuffer(buf, dtype=STORAGE_DTYPES[e.dtype]).reshape(e.shape)
        return TensorRecord(name, e.shape, e.dtype, data)

    def read(self, name: str) -> np.ndarray:
        """Tensor values as float32 (16-bit types are widened)."""
        return self.read_raw(name).as_float32()


class MemoryStore:
    """In-memory store with the same read interface as :class:`CheckpointStore`."""

    def __init__(self, records: Iterable[TensorRecord] = (), metadata: dict | None = None):
        self._records: dict[str, TensorRecord] = {}
        self.metadata = dict(metadata or {})
        for rec in records:
            self.add(rec)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: str = "F32") -> "MemoryStore":
        return cls(TensorRecord.from_array(k, v, dtype) for k, v in arrays.items())

    def add(self, record: TensorRecord):
        if record.name in self._records:
            raise FormatError("duplicate tensor name", tensor=record.name)
        self._records[record.name] = record

    def names(self) -> list[str]:
        return sorted(self._records)

    def __contains__(self, name):
        return name in self._records

    def __len__(self):
        return len(self._records)

    def shape(self, name):
        return self._get(name).shape

    def dtype(self, name):
        return self._get(name).dtype

    def _get(self, name) -> TensorRecord:
        try:
            return self._records[name]
        except KeyError:
            raise SchemaError("tensor not present in checkpoint", tensor=name) from None

    def read_raw(self, name) -> TensorRecord:
        return self._get(name)

    def read(self, name) -> np.ndarray:
        return self._get(name).as_float32()

    def records(self) -> Iterator[TensorRecord]:
        for name in self.names():
            yield self._records[name]

    def close(self):
        pass


def _parse_header(raw: bytes, buffer_len: int) -> tuple[dict[str, _Entry], dict]:
    def no_duplicates(pairs):
        seen = {}
        for k, v in pairs:
            if k in seen:
                raise FormatError("duplicate tensor name in header", tensor=k)
            seen[k] = v
        return seen

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")

    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict):
        raise FormatError("__metadata__ must be an object")

    entries = {}
    spans = []
    for name, info in header.items():
        if not name:
            raise FormatError("empty tensor name in header")
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= info.keys():
            raise FormatError("header entry lacks dtype/shape/data_offsets", tensor=name)
        dtype = info["dtype"]
        if dtype not in STORAGE_DTYPES:
            raise DtypeError(f"unsupported dtype {dtype!r}", tensor=name)
        shape, offsets = info["shape"], info["data_offsets"]
        if not (isinstance(shape, list) and all(isinstance(d, int) and d >= 0 for d in shape)):
            raise FormatError(f"invalid shape {shape!r}", tensor=name)
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(isinstance(o, int) for o in offsets)):
            raise FormatError(f"invalid data_offsets {offsets!r}", tensor=name)
        begin, end = offsets
        if not 0 <= begin <= end:
            raise FormatError(f"invalid data_offsets {offsets!r}", tensor=name)
        if end - begin != math.prod(shape) * STORAGE_DTYPES[dtype].itemsize:
            raise FormatError("byte span does not match shape and dtype", tensor=name)
        if end > buffer_len:
            raise FormatError("tensor data extends past end of file (truncated?)", tensor=name)
        entries[name] = _Entry(dtype, tuple(shape), begin, end)
        if end > begin:
            spans.append((begin, end, name))

    spans.sort()
    for (_, prev_end, _), (begin, _, name) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise FormatError("tensor data overlaps another tensor", tensor=name)
    return entries, metadata


def open_checkpoint(path) -> CheckpointStore:
    """Open a safetensors file. Only the header is parsed here."""
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            prefix = fh.read(8)
            if len(prefix) < 8:
                raise FormatError(f"{path}: file shorter than the 8-byte header length")
            (header_len,) = struct.unpack("<Q", prefix)
            if header_len > _HEADER_LIMIT or 8 + header_len > size:
                raise FormatError(f"{path}: header length {header_len} exceeds file size {size}")
            raw = fh.read(header_len)
    except FileNotFoundError as exc:
        raise StoreIOError(f"{path}: no such file") from exc
    except IsADirectoryError as exc:
        raise StoreIOError(f"{path}: is a directory") from exc
    data_start = 8 + header_len
    entries, metadata = _parse_header(raw, size - data_start)
    return CheckpointStore(path, entries, data_start, metadata)


def write_checkpoint(path, tensors: Iterable[TensorRecord], metadata: Mapping[str, str] | None = None):
    """Write records to ``path`` atomically, in iteration order.

    The header is validated in full before any byte reaches disk.
    """
    records = list(tensors)
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    for rec in records:
        if rec.name in header or rec.name == "__metadata__":
            raise FormatError("duplicate tensor name", tensor=rec.name)
        header[rec.name] = {
            "dtype": rec.dtype,
            "shape": list(rec.shape),
            "data_offsets": [offset, offset + rec.nbytes],
        }
        offset += rec.nbytes
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-len(blob) % 8)

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".stfmerge-", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(struct.pack("<Q", len(blob)))
                fh.write(blob)
                for rec in records:
                    data = np.ascontiguousarray(rec.data, dtype=STORAGE_DTYPES[rec.dtype])
                    fh.write(data.tobytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise StoreIOError(f"{path}: {exc.strerror or exc}") from exc


class ParamRole(str, enum.Enum):
    LINEAR = "linear"
    BIAS = "bias"
    EMBEDDING = "embedding"
    NORMALIZATION = "normalization"
    IGNORE = "ignore"

    @classmethod
    def parse(cls, value: str) -> "ParamRole":
        key = str(value).strip().lower()
        aliases = {"linearmatrix": "linear", "linear_matrix": "linear", "norm": "normalization"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(r.value for r in cls)
            raise ConfigError(f"unknown role {value!r} (expected one of {choices})") from None


# Ordered; first match wins. Globs are matched case-insensitively against
# the full tensor name; a "re:" prefix switches to a Python regex (search).
DEFAULT_PATTERNS: tuple[tuple[str, ParamRole], ...] = (
    ("*.attn.bias", ParamRole.IGNORE),
    ("*.attn.masked_bias", ParamRole.IGNORE),
    ("*position_ids", ParamRole.IGNORE),
    ("*inv_freq", ParamRole.IGNORE),
    ("*norm*", ParamRole.NORMALIZATION),
    ("*ln_*", ParamRole.NORMALIZATION),
    ("*.ln.*", ParamRole.NORMALIZATION),
    ("*bias", ParamRole.BIAS),
    ("*embed*", ParamRole.EMBEDDING),
    ("shared.weight", ParamRole.EMBEDDING),
    ("*wte.weight", ParamRole.EMBEDDING),
    ("*wpe.weight", ParamRole.EMBEDDING),
    ("*lm_head.weight", ParamRole.EMBEDDING),
    ("*relative_attention_bias*", ParamRole.EMBEDDING),
)


@dataclass
class RoleRules:
    patterns: list[tuple[str, ParamRole]] = field(default_factory=lambda: list(DEFAULT_PATTERNS))
    default_2d: ParamRole = ParamRole.LINEAR
    default_other: ParamRole = ParamRole.BIAS

    def compiled(self) -> list[tuple[re.Pattern, ParamRole, str]]:
        out = []
        for pattern, role in self.patterns:
            role = ParamRole.parse(role) if not isinstance(role, ParamRole) else role
            try:
                if pattern.startswith("re:"):
                    rx = re.compile(pattern[3:])
                else:
                    rx = re.compile(fnmatch.translate(pattern), re.IGNORECASE)
            except re.error as exc:
                raise ConfigError(f"invalid role pattern {pattern!r}: {exc}") from None
            out.append((rx, role, pattern))
        return out


def classify_one(name: str, shape: Sequence[int], compiled, rules: RoleRules) -> ParamRole:
    for rx, role, pattern in compiled:
        hit = rx.search(name) if pattern.startswith("re:") else rx.match(name)
        if hit:
            break
    else:
        role = rules.default_2d if len(shape) == 2 else rules.default_other
    if role is ParamRole.LINEAR and len(shape) != 2:
        raise ConfigError(f"role 'linear' requires a 2-D tensor, got shape {tuple(shape)}", tensor=name)
    return role


def classify(store, rules: RoleRules | None = None) -> dict[str, ParamRole]:
    """Assign every tensor in ``store`` exactly one :class:`ParamRole`."""
    rules = rules or RoleRules()
    compiled = rules.compiled()
    return {name: classify_one(name, store.shape(name), compiled, rules) for name in store.names()}


def materialize_lora_delta(a_factor, b_factor, lora_scale: float) -> np.ndarray:
    """Dense ``lora_scale * B @ A`` for a LoRA pair, B (m, k) and A (k, n)."""
    a = a_factor.as_float32() if isinstance(a_factor, TensorRecord) else np.asarray(a_factor)
    b = b_factor.as_float32() if isinstance(b_factor, TensorRecord) else np.asarray(b_factor)
    if a.ndim != 2 or b.ndim != 2 or b.shape[1] != a.shape[0]:
        raise ShapeError(f"LoRA factors incompatible: B {b.shape} x A {a.shape}")
    return float(lora_scale) * (b.astype(np.float64) @ a.astype(np.float64))


class LoraTaskStore:
    """A fine-tuned view of ``base`` built from a LoRA adapter file.

    Adapter tensors named ``<prefix>.lora_A.weight`` / ``<prefix>.lora_B.weight``
    patch the base tensor ``<prefix>.weight``; a leading ``base_model.model.``
    (as written by PEFT) is stripped when the unstripped name is not in the base.
    Base tensors without an adapter are passed through unchanged.
    """

    def __init__(self, base, adapter, lora_scale: float = 1.0):
        self.base = base
        self.adapter = adapter
        self.lora_scale = float(lora_scale)
        self.targets: dict[str, tuple[str, str]] = {}
        for name in adapter.names():
            if ".lora_A." not in name:
                continue
            prefix, _, suffix = name.partition(".lora_A.")
            b_name = f"{prefix}.lora_B.{suffix}"
            if b_name not in adapter:
                raise SchemaError("LoRA A factor has no matching B factor", tensor=name)
            target = f"{prefix}.{suffix}"
            if target not in base and target.startswith("base_model.model."):
                target = target[len("base_model.model."):]
            if target not in base:
                raise SchemaError("LoRA adapter targets a tensor missing from the base", tensor=target)
            self.targets[target] = (name, b_name)

    def names(self):
        return self.base.names()

    def __contains__(self, name):
        return name in self.base

    def shape(self, name):
        return self.base.shape(name)

    def dtype(self, name):
        return "F32" if name in self.targets else self.base.dtype(name)

    def delta(self, name) -> np.ndarray | None:
        if name not in self.targets:
            return None
        a_name, b_name = self.targets[name]
        delta = materialize_lora_delta(self.adapter.read_raw(a_name), self.adapter.read_raw(b_name), self.lora_scale)
        if delta.shape != self.base.shape(name):
            raise ShapeError(f"LoRA delta shape {delta.shape} != base shape {self.base.shape(name)}", tensor=name)
        return delta

    def read(self, name) -> np.ndarray:
        base = self.base.read(name)
        delta = self.delta(name)
        if delta is None:
            return base
        return (base.astype(np.float64) + delta).astype(np.float32)

    def read_raw(self, name) -> TensorRecord:
        if name not in self.targets:
            return self.base.read_raw(name)
        return TensorRecord.from_array(name, self.read(name))

    def close(self):
        self.adapter.close()


@dataclass
class CheckpointSet:
    """A pre-trained base plus ``T >= 1`` fine-tuned stores derived from it."""

    base: object
    tasks: list
    task_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("at least one task checkpoint is required")
        if not self.task_ids:
            self.task_ids = [f"task{i}" for i in range(len(self.tasks))]
        if len(self.task_ids) != len(self.tasks):
            raise ConfigError("number of task ids does not match number of task checkpoints")
        if len(set(self.task_ids)) != len(self.task_ids):
            raise ConfigError("task ids must be unique")

    def validate(self, roles: Mapping[str, ParamRole]):
        """Check every non-ignored base tensor exists with the same shape in each task."""
        for name, role in roles.items():
            if role is ParamRole.IGNORE:
                continue
            shape = self.base.shape(name)
            for tid, store in zip(self.task_ids, self.tasks):
                if name not in store:
                    raise SchemaError(f"missing from task checkpoint {tid!r}", tensor=name)
                if tuple(store.shape(name)) != tuple(shape):
                    raise ShapeError(
                        f"shape {tuple(store.shape(name))} in task {tid!r} != base shape {tuple(shape)}",
                        tensor=name,
                    )

    def close(self):
        for store in [self.base, *self.tasks]:
            store.close()
