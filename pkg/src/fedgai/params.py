"""Tagged parameter sets and their binary checkpoint / wire encoding.

Layout (all integers little-endian)::

    b"FGAI" | version:u16 | count:u32
    per entry: name_len:u16 | name:utf-8 | role:u8 | kind:u8 | rank:u8
               | dims: rank x u32 | values: prod(dims) x float32
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"FGAI"
FORMAT_VERSION = 1
HEADER_BYTES = len(MAGIC) + 2 + 4

ROLES = ("generator", "discriminator", "encoder")
KINDS = (
    "conv_w",
    "conv_b",
    "dense_w",
    "dense_b",
    "bn_gamma",
    "bn_beta",
    "bn_running_mean",
    "bn_running_var",
    "other",
)
BN_KINDS = frozenset({"bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"})

_ROLE_CODE = {r: i for i, r in enumerate(ROLES)}
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}


class FormatError(ValueError):
    """Raised for malformed checkpoint or wire bytes."""


@dataclass
class ParamEntry:
    name: str
    role: str
    kind: str
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


class ParamSet:
    """Ordered, uniquely named collection of role/kind tagged arrays."""

    def __init__(self, entries: Iterable[ParamEntry] = ()):
        self.entries: list[ParamEntry] = []
        self._index: dict[str, int] = {}
        for e in entries:
            self.append(e)

    def append(self, entry: ParamEntry) -> None:
        if entry.name in self._index:
            raise ValueError(f"duplicate parameter name {entry.name!r}")
        if entry.role not in _ROLE_CODE:
            raise ValueError(f"unknown role {entry.role!r}")
        if entry.kind not in _KIND_CODE:
            raise ValueError(f"unknown kind {entry.kind!r}")
        self._index[entry.name] = len(self.entries)
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self.entries)

    def __getitem__(self, name: str) -> ParamEntry:
        return self.entries[self._index[name]]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def layer_table(self) -> list[tuple[str, str, str, tuple[int, ...]]]:
        return [(e.name, e.role, e.kind, e.shape) for e in self.entries]

    def scalar_count(self) -> int:
        return int(sum(int(np.prod(e.shape, dtype=np.int64)) for e in self.entries))

    def filter(self, roles: Sequence[str] | None = None, exclude_kinds: Iterable[str] = ()) -> "ParamSet":
        excl = set(exclude_kinds)
        return ParamSet(
            ParamEntry(e.name, e.role, e.kind, e.values)
            for e in self.entries
            if (roles is None or e.role in roles) and e.kind not in excl
        )

    def copy(self) -> "ParamSet":
        return ParamSet(ParamEntry(e.name, e.role, e.kind, e.values.copy()) for e in self.entries)

    def to_bytes(self) -> bytes:
        return encode(self)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ParamSet":
        return decode(raw)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} entries, {self.scalar_count()} scalars)"


def export_params(models, roles: Sequence[str] | None = None, exclude_kinds: Iterable[str] = ()) -> ParamSet:
    """Snapshot the parameters of one model or a sequence of models."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    excl = set(exclude_kinds)
    out = ParamSet()
    for model in models:
        if roles is not None and model.role not in roles:
            continue
        for name, kind, tensor in model.named_params():
            if kind in excl:
                continue
            out.append(ParamEntry(name, model.role, kind, np.array(tensor.data, dtype=np.float64)))
    return out


def import_params(models, params: ParamSet, skip_kinds: Iterable[str] = ()) -> int:
    """Copy matching entries of ``params`` into the model(s); returns the count loaded.

    Every entry must name an existing parameter with identical role, kind
    and shape.
    """
    if not isinstance(models, (list, tuple)):
        models = [models]
    skip = set(skip_kinds)
    table = {}
    for model in models:
        for name, kind, tensor in model.named_params():
            table[name] = (model.role, kind, tensor)
    loaded = 0
    for e in params:
        if e.kind in skip:
            continue
        if e.name not in table:
            raise KeyError(f"no parameter named {e.name!r}")
        role, kind, tensor = table[e.name]
        if (role, kind, tuple(tensor.shape)) != (e.role, e.kind, e.shape):
            raise ValueError(
                f"{e.name}: expected {(role, kind, tuple(tensor.shape))}, got {(e.role, e.kind, e.shape)}"
            )
        tensor.data[...] = e.values
        loaded += 1
    return loaded


def entry_bytes(name: str, shape: Sequence[int]) -> int:
    return 2 + len(name.encode("utf-8")) + 3 + 4 * len(shape) + 4 * int(np.prod(shape, dtype=np.int64))


def encoded_size(params: ParamSet) -> int:
    return HEADER_BYTES + sum(entry_bytes(e.name, e.shape) for e in params)


def encode(params: ParamSet) -> bytes:
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(params))]
    for e in params:
        name = e.name.encode("utf-8")
        if len(e.shape) > 255:
            raise FormatError(f"{e.name}: rank {len(e.shape)} exceeds 255")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BBB", _ROLE_CODE[e.role], _KIND_CODE[e.kind], len(e.shape)))
        parts.append(struct.pack(f"<{len(e.shape)}I", *e.shape))
        parts.append(np.ascontiguousarray(e.values, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> ParamSet:
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("bad magic; not an FGAI parameter file")
    if len(view) < HEADER_BYTES:
        raise FormatError("truncated header")
    version, count = struct.unpack_from("<HI", view, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = HEADER_BYTES
    out = ParamSet()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            role_code, kind_code, rank = struct.unpack_from("<BBB", view, pos)
            pos += 3
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(view):
                raise FormatError(f"{name}: truncated values")
            values = np.frombuffer(view, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(dims)
            pos += 4 * n
            out.append(ParamEntry(name, ROLES[role_code], KINDS[kind_code], values))
    except (struct.error, IndexError) as exc:
        raise FormatError(f"truncated or corrupt parameter data: {exc}") from exc
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes")
    return out


def write_checkpoint(path: str | os.PathLike, params: ParamSet) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(params))


def read_checkpoint(path: str | os.PathLike) -> ParamSet:
    with open(path, "rb") as fh:
        return decode(fh.read())
