"""Binary checkpoint with named parameter groups.

Layout (all integers little-endian uint32)::

    b"MCKPT\\n"
    format_version
    config_len, config JSON (UTF-8, sorted keys)
    group_count
    per group (canonical order encoder, sbm1, sbm2, decoder, rm):
        name_len, name, param_count
        per parameter (sorted by name):
            name_len, name, rank, extents[rank], float32 payload (little-endian)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import FormatError
from .model import GROUP_ORDER, Model, NetworkConfig

MAGIC = b"MCKPT\n"
FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    groups: dict[str, dict[str, np.ndarray]]
    config: NetworkConfig
    format_version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, **meta) -> "ModelCheckpoint":
        state = {g: {n: a.astype(np.float32) for n, a in arrays.items()} for g, arrays in model.state().items()}
        return cls(groups=state, config=model.config, meta=dict(meta))

    def group_bytes(self, group: str) -> bytes:
        """Serialized record block of one group; used for byte-equality checks."""
        return _encode_group(group, self.groups[group])


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _encode_group(group: str, params: dict[str, np.ndarray]) -> bytes:
    name = group.encode("utf-8")
    parts = [_u32(len(name)), name, _u32(len(params))]
    for pname in sorted(params):
        arr = np.asarray(params[pname])
        encoded = pname.encode("utf-8")
        parts += [_u32(len(encoded)), encoded, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(arr.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


def checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    header = {"network": ckpt.config.to_dict(), "meta": ckpt.meta}
    cfg = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    groups = [g for g in GROUP_ORDER if g in ckpt.groups]
    extra = set(ckpt.groups) - set(GROUP_ORDER)
    if extra:
        raise ValueError(f"unknown parameter groups {sorted(extra)}")
    parts = [MAGIC, _u32(ckpt.format_version), _u32(len(cfg)), cfg, _u32(len(groups))]
    parts += [_encode_group(g, ckpt.groups[g]) for g in groups]
    return b"".join(parts)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"truncated checkpoint reading {what} at offset {self.pos}: "
                f"need {n} bytes, {len(self.raw) - self.pos} left"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        return self.take(self.u32(what + " length"), what).decode("utf-8")


def parse_checkpoint(raw: bytes) -> ModelCheckpoint:
    if not raw.startswith(MAGIC):
        raise FormatError(f"bad checkpoint magic at offset 0: {raw[:len(MAGIC)]!r}")
    r = _Reader(raw)
    r.take(len(MAGIC), "magic")
    version = r.u32("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {version}")
    header = json.loads(r.text("config"))
    config = NetworkConfig.from_dict(header["network"])
    groups: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(r.u32("group count")):
        gname = r.text("group name")
        if gname not in GROUP_ORDER:
            raise FormatError(f"unknown group {gname!r} before offset {r.pos}")
        params = {}
        for _ in range(r.u32(f"{gname} parameter count")):
            pname = r.text("parameter name")
            rank = r.u32(f"{pname} rank")
            shape = tuple(r.u32(f"{pname} extent") for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64))
            payload = r.take(4 * count, f"{pname} payload")
            params[pname] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        groups[gname] = params
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after offset {r.pos}")
    return ModelCheckpoint(groups=groups, config=config, format_version=version, meta=header.get("meta", {}))


def load_checkpoint(path) -> ModelCheckpoint:
    return parse_checkpoint(Path(path).read_bytes())


def load_into(model: Model, ckpt: ModelCheckpoint, groups=None, sources: dict[str, str] | None = None) -> list[str]:
    """Copy checkpoint groups into ``model``.

    By default every group present in both is loaded, so a checkpoint from an
    earlier stage (without SBMs) loads cleanly into a larger model.  ``sources``
    maps a model group to the checkpoint group it is initialized from (e.g.
    ``{"sbm2": "sbm1"}``).  Shape mismatches inside a loaded group raise.
    Returns the list of loaded model groups.
    """
    sources = dict(sources or {})
    if groups is None:
        groups = [g for g in model.groups if sources.get(g, g) in ckpt.groups]
    for g in groups:
        src = sources.get(g, g)
        if src not in ckpt.groups:
            raise KeyError(f"checkpoint has no group {src!r} (available: {sorted(ckpt.groups)})")
        if g not in model.groups:
            raise KeyError(f"model has no group {g!r}")
        model.load_group(g, ckpt.groups[src], source_group=src)
    return list(groups)
