"""Bit-exact persistence of model configurations, parameters, and provenance.

CBDC container layout:

    bytes 0..3    magic "CBDC"
    bytes 4..7    version, unsigned 32-bit little-endian (currently 1)
    bytes 8..15   header length H, unsigned 64-bit little-endian
    bytes 16..16+H  UTF-8 JSON header, keys sorted (canonical)
    remainder     raw tensor payloads, little-endian IEEE-754, row-major,
                  each aligned to an 8-byte boundary with zero padding,
                  offsets relative to the payload start

The header carries {"config": ..., "meta": ..., "tensors": [{name, dtype,
shape, byte_offset, byte_len}, ...]}.  Tensors are listed in sorted-name
order, so identical checkpoints serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import F32, F64, Tensor
from .transformer import ModelConfig, ParamSet, validate_params

MAGIC = b"CBDC"
VERSION = 1

_DTYPE_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(Exception):
    """Base class for persistence failures."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedDataError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Meta:
    """Provenance: lineage entries are append-only stage descriptors such as
    "distilled-from:<name>" or "interpolated alpha=<a> between <s>,<l>"."""

    name: str = ""
    seed: int = 0
    step_count: int = 0
    lineage: list[str] = field(default_factory=list)
    loss_curves: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Meta":
        return cls(
            name=d.get("name", ""),
            seed=int(d.get("seed", 0)),
            step_count=int(d.get("step_count", 0)),
            lineage=list(d.get("lineage", [])),
            loss_curves=list(d.get("loss_curves", [])),
        )

    def child(self, stage: str, **updates) -> "Meta":
        """New meta with the stage appended; lineage stays append-only."""
        out = Meta(
            name=updates.get("name", self.name),
            seed=updates.get("seed", self.seed),
            step_count=updates.get("step_count", self.step_count),
            lineage=self.lineage + [stage],
            loss_curves=[dict(c) for c in self.loss_curves],
        )
        return out


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamSet
    meta: Meta = field(default_factory=Meta)

    def validate(self) -> None:
        validate_params(self.config, self.params)

    def count_params(self) -> int:
        return sum(p.size for p in self.params.values())


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Bitwise equality of config, payloads, and provenance."""
    if a.config != b.config or a.meta.to_dict() != b.meta.to_dict():
        return False
    if set(a.params) != set(b.params):
        return False
    return all(
        a.params[k].dtype == b.params[k].dtype
        and a.params[k].shape == b.params[k].shape
        and a.params[k].data.tobytes() == b.params[k].data.tobytes()
        for k in a.params
    )


def _align8(n: int) -> int:
    return (n + 7) & ~7


def save(ckpt: Checkpoint, path: str) -> None:
    ckpt.validate()
    names = sorted(ckpt.params)
    entries = []
    offset = 0
    for name in names:
        t = ckpt.params[name]
        tag = _DTYPE_TO_TAG[np.dtype(t.dtype)]
        byte_len = t.size * np.dtype(t.dtype).itemsize
        offset = _align8(offset)
        entries.append(
            {"name": name, "dtype": tag, "shape": list(t.shape), "byte_offset": offset, "byte_len": byte_len}
        )
        offset += byte_len
    header = {
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta.to_dict(),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        written = 0
        for entry, name in zip(entries, names):
            pad = entry["byte_offset"] - written
            if pad:
                fh.write(b"\x00" * pad)
                written += pad
            payload = np.ascontiguousarray(ckpt.params[name].data, dtype=_TAG_TO_DTYPE[entry["dtype"]])
            fh.write(payload.tobytes())
            written += entry["byte_len"]


def load_header(path: str) -> dict:
    """Parse magic/version/header only; cmd_inspect uses this to avoid
    reading tensor payloads."""
    header, _ = _read_header(path)
    return header


def _read_header(path: str) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        raw = fh.read(4)
        if len(raw) < 4:
            raise TruncatedDataError("file ends inside the version field")
        (version,) = struct.unpack("<I", raw)
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported version {version}")
        raw = fh.read(8)
        if len(raw) < 8:
            raise TruncatedDataError("file ends inside the header length field")
        (hlen,) = struct.unpack("<Q", raw)
        header_bytes = fh.read(hlen)
        if len(header_bytes) < hlen:
            raise TruncatedDataError("file ends inside the header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise TruncatedDataError(f"header is not valid JSON: {e}") from e
    for key in ("config", "meta", "tensors"):
        if key not in header:
            raise TruncatedDataError(f"header missing '{key}'")
    return header, 16 + hlen


def load(path: str) -> Checkpoint:
    header, payload_start = _read_header(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as e:
        raise ShapeMismatchError(f"invalid config record: {e}") from e
    meta = Meta.from_dict(header["meta"])

    with open(path, "rb") as fh:
        fh.seek(0, 2)
        file_len = fh.tell()
        params: ParamSet = {}
        for entry in header["tensors"]:
            tag = entry["dtype"]
            if tag not in _TAG_TO_DTYPE:
                raise ShapeMismatchError(f"tensor {entry['name']} has unknown dtype tag {tag!r}")
            dtype = _TAG_TO_DTYPE[tag]
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            expected_len = count * dtype.itemsize
            if entry["byte_len"] != expected_len:
                raise ShapeMismatchError(
                    f"tensor {entry['name']}: byte_len {entry['byte_len']} != shape {shape} x {dtype.itemsize}"
                )
            start = payload_start + int(entry["byte_offset"])
            if start + expected_len > file_len:
                raise TruncatedDataError(f"tensor {entry['name']} payload is truncated")
            fh.seek(start)
            buf = fh.read(expected_len)
            if len(buf) < expected_len:
                raise TruncatedDataError(f"tensor {entry['name']} payload is truncated")
            arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
            native = F32 if tag == "f32" else F64
            params[entry["name"]] = Tensor(arr.astype(native), dtype=native)

    ckpt = Checkpoint(config=config, params=params, meta=meta)
    try:
        ckpt.validate()
    except Exception as e:
        raise ShapeMismatchError(str(e)) from e
    return ckpt
