"""Masked checkpoints and their single-file binary format.

Layout (all little-endian)::

    b"PTDL" | u32 version | u64 header length | UTF-8 JSON header | payload

The payload holds every parameter tensor as float32 in manifest order,
followed by one packed bitmask per prunable tensor (bit 1 = keep,
little-endian bit order, byte-padded).
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from prunedistill.errors import BadMagicError, ConfigError, ManifestError, MissingDataError, VersionError
from prunedistill.layers import ArchitectureSpec, param_shapes, prunable_names
from prunedistill.network import init_params
from prunedistill.tensor import get_dtype

log = logging.getLogger(__name__)

MAGIC = b"PTDL"
VERSION = 1
SUPPORTED_VERSIONS = (1,)
_PREAMBLE = struct.Struct("<4sIQ")
HEADER_KEYS = ("arch", "tensors", "masks", "seed", "epoch", "metrics")
ENTRY_KEYS = ("name", "shape", "offset", "nbytes")


@dataclass
class MaskedCheckpoint:
    arch: ArchitectureSpec
    params: dict
    masks: dict
    seed: int = 0
    epoch: int = 0
    metrics: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, arch: ArchitectureSpec, seed: int) -> "MaskedCheckpoint":
        params = init_params(arch, seed)
        masks = {name: np.ones(params[name].shape, dtype=bool) for name in prunable_names(arch)}
        return cls(arch, params, masks, seed=seed)

    @property
    def sparsity(self) -> float:
        total = sum(m.size for m in self.masks.values())
        if total == 0:
            return 0.0
        return 1.0 - sum(int(np.count_nonzero(m)) for m in self.masks.values()) / total

    def copy(self) -> "MaskedCheckpoint":
        return MaskedCheckpoint(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.masks.items()},
            self.seed,
            self.epoch,
            dict(self.metrics),
        )

    def masked_params(self) -> dict:
        out = dict(self.params)
        for name, mask in self.masks.items():
            # np.where, not multiplication: pruned entries must be +0.0
            out[name] = np.where(mask, self.params[name], 0).astype(self.params[name].dtype, copy=False)
        return out


def to_bytes(ckpt: MaskedCheckpoint) -> bytes:
    tensors, masks, chunks = [], [], []
    offset = 0
    for name, value in ckpt.params.items():
        data = np.ascontiguousarray(value, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    for name, mask in ckpt.masks.items():
        data = np.packbits(mask.ravel().astype(np.uint8), bitorder="little").tobytes()
        masks.append({"name": name, "shape": list(mask.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "arch": ckpt.arch.to_dict(),
        "tensors": tensors,
        "masks": masks,
        "seed": int(ckpt.seed),
        "epoch": int(ckpt.epoch),
        "sparsity": ckpt.sparsity,
        "metrics": ckpt.metrics,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)


def check_valid_header(header) -> None:
    if not isinstance(header, dict):
        raise ManifestError(f"header must be a JSON object, got {type(header).__name__}")
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise ManifestError(f"header is missing {missing}")
    if not isinstance(header["arch"], dict) or not isinstance(header["metrics"], dict):
        raise ManifestError("header arch and metrics must be JSON objects")
    for key in ("seed", "epoch"):
        if not isinstance(header[key], int) or isinstance(header[key], bool):
            raise ManifestError(f"header {key} must be an integer, got {header[key]!r}")
    for key in ("tensors", "masks"):
        if not isinstance(header[key], list):
            raise ManifestError(f"header {key} must be a list")
        for entry in header[key]:
            if not isinstance(entry, dict) or any(k not in entry for k in ENTRY_KEYS):
                raise ManifestError(f"{key} entry {entry!r} needs fields {list(ENTRY_KEYS)}")
            shape, offset, nbytes = entry["shape"], entry["offset"], entry["nbytes"]
            ints = [offset, nbytes] + (shape if isinstance(shape, list) else [None])
            if not isinstance(entry["name"], str) or not all(isinstance(v, int) and v >= 0 for v in ints):
                raise ManifestError(f"{key} entry {entry.get('name')!r} has a bad name, shape, offset or size")


def from_bytes(blob: bytes) -> MaskedCheckpoint:
    if len(blob) < _PREAMBLE.size:
        raise ManifestError(f"checkpoint is {len(blob)} bytes, shorter than its {_PREAMBLE.size}-byte preamble")
    magic, version, head_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version not in SUPPORTED_VERSIONS:
        raise VersionError(f"checkpoint version {version} is not supported (supported: {list(SUPPORTED_VERSIONS)})")
    start = _PREAMBLE.size + head_len
    if start > len(blob):
        raise ManifestError(f"header claims {head_len} bytes but only {len(blob) - _PREAMBLE.size} remain")
    try:
        header = json.loads(blob[_PREAMBLE.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ManifestError(f"unreadable header: {err}") from None
    check_valid_header(header)
    payload = memoryview(blob)[start:]
    try:
        arch = ArchitectureSpec.from_dict(header["arch"])
    except (ConfigError, TypeError, ValueError) as err:
        raise ManifestError(f"bad architecture in header: {err}") from None

    expected = param_shapes(arch)
    entries = header["tensors"] + header["masks"]
    cursor = 0
    for entry in entries:
        if entry["offset"] != cursor:
            raise ManifestError(f"{entry['name']}: offset {entry['offset']} where {cursor} was expected")
        cursor += entry["nbytes"]
    if cursor != len(payload):
        raise ManifestError(f"manifest covers {cursor} payload bytes, file has {len(payload)}")

    dtype = get_dtype()
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        if expected.get(entry["name"]) != shape or entry["nbytes"] != 4 * int(np.prod(shape)):
            raise ManifestError(f"tensor {entry['name']} {shape} does not match the architecture")
        raw = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=entry["offset"])
        params[entry["name"]] = raw.reshape(shape).astype(dtype)
    if set(params) != set(expected):
        raise ManifestError(f"missing tensors: {sorted(set(expected) - set(params))}")
    masks = {}
    for entry in header["masks"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        if params.get(entry["name"]) is None or params[entry["name"]].shape != shape or entry["nbytes"] != (size + 7) // 8:
            raise ManifestError(f"mask {entry['name']} {shape} does not match its tensor")
        packed = np.frombuffer(payload, dtype=np.uint8, count=entry["nbytes"], offset=entry["offset"])
        masks[entry["name"]] = np.unpackbits(packed, count=size, bitorder="little").astype(bool).reshape(shape)
    return MaskedCheckpoint(arch, params, masks, header["seed"], header["epoch"], header["metrics"])


def save_checkpoint(ckpt: MaskedCheckpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    log.debug("saved %s (sparsity %.4f) to %s", ckpt.arch.name, ckpt.sparsity, path)
    return path


def load_checkpoint(path) -> MaskedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
