"""Payload backends: stream-embedded fixed-size records and the SFC-keyed heap.

Stream records are fixed-size per entity kind. Every field carries a
persistence annotation (persistent fields survive between traversals, discard
fields are reset to their default whenever the record is loaded) and an
exchange annotation (parallelise fields cross rank boundaries, local fields
do not). Variable-size data goes through the heap: an associative store of
integer keys whose maintenance is entirely the caller's responsibility.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PERSISTENT = "persistent"
DISCARD = "discard"
PARALLELISE = "parallelise"
LOCAL = "local"

_STRUCT_FMT = {"double": "d", "int": "q"}


class HeapKeyError(KeyError):
    """Access through a key that was never issued or has been deleted."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    type: str = "double"
    persistence: str = PERSISTENT
    exchange: str = LOCAL
    default: float | int = 0

    def __post_init__(self):
        if self.type not in _STRUCT_FMT:
            raise ValueError(f"unsupported field type {self.type!r}")
        if self.persistence not in (PERSISTENT, DISCARD):
            raise ValueError(f"bad persistence {self.persistence!r}")
        if self.exchange not in (PARALLELISE, LOCAL):
            raise ValueError(f"bad exchange {self.exchange!r}")


class FieldSchema:
    """Ordered field registry for one entity kind ('vertex' or 'cell')."""

    def __init__(self, entity: str):
        self.entity = entity
        self.fields: list[FieldSpec] = []
        self._index: dict[str, int] = {}

    def register(self, name, type="double", persistence=PERSISTENT,
                 exchange=LOCAL, default=0) -> int:
        if name in self._index:
            raise ValueError(f"field {name!r} already registered")
        spec = FieldSpec(name, type, persistence, exchange, default)
        self._index[name] = len(self.fields)
        self.fields.append(spec)
        return self._index[name]

    def index(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.fields)

    def defaults(self) -> list:
        return [spec.default for spec in self.fields]

    def reset_discard(self, values: list) -> None:
        for i, spec in enumerate(self.fields):
            if spec.persistence == DISCARD:
                values[i] = spec.default

    def exchanged_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.fields) if s.exchange == PARALLELISE]

    @property
    def record_size(self) -> int:
        """Serialized bytes per record; uniform for all entities of this kind."""
        return struct.calcsize(self.struct_format)

    @property
    def struct_format(self) -> str:
        return "<" + "".join(_STRUCT_FMT[s.type] for s in self.fields)

    def pack(self, values: list) -> bytes:
        return struct.pack(self.struct_format, *values)

    def unpack(self, blob: bytes) -> list:
        return list(struct.unpack(self.struct_format, blob))

    def manifest_lines(self) -> list[str]:
        return [
            f"{self.entity}.{s.name}: {s.type} {s.persistence} {s.exchange}"
            for s in self.fields
        ]

    @classmethod
    def from_manifest_lines(cls, entity: str, lines: list[str]) -> "FieldSchema":
        schema = cls(entity)
        for line in lines:
            head, rest = line.split(":", 1)
            ent, name = head.strip().split(".", 1)
            if ent != entity:
                raise ValueError(f"manifest line for {ent!r}, expected {entity!r}")
            type_, persistence, exchange = rest.split()
            schema.register(name, type_, persistence, exchange)
        return schema


def dump_manifest(schemas: list[FieldSchema]) -> str:
    lines = []
    for schema in schemas:
        lines.extend(schema.manifest_lines())
    return "\n".join(lines) + "\n"


class Heap:
    """Associative store of variable-size blocks behind 64-bit integer keys.

    Keys are either issued by :meth:`create` or supplied by the caller (for
    SFC-index keying). Lookups are never implied by traversal order; stale
    access is a hard error because bookkeeping is delegated to the user.
    """

    def __init__(self):
        self._blocks: dict[int, object] = {}
        self._next_key = 1
        self.reads = 0
        self.writes = 0

    def create(self, block, key: int | None = None) -> int:
        if key is None:
            key = self._next_key
            self._next_key += 1
        elif key in self._blocks:
            raise HeapKeyError(f"key {key} already live")
        self._blocks[key] = block
        self.writes += 1
        return key

    def get(self, key: int):
        try:
            block = self._blocks[key]
        except KeyError:
            raise HeapKeyError(f"stale or unknown heap key {key}") from None
        self.reads += 1
        return block

    def put(self, key: int, block) -> None:
        if key not in self._blocks:
            raise HeapKeyError(f"stale or unknown heap key {key}")
        self._blocks[key] = block
        self.writes += 1

    def delete(self, key: int) -> None:
        try:
            del self._blocks[key]
        except KeyError:
            raise HeapKeyError(f"stale or unknown heap key {key}") from None

    @property
    def live_count(self) -> int:
        return len(self._blocks)

    def copy(self) -> "Heap":
        import copy as _copy

        clone = Heap()
        clone._blocks = {k: _copy.deepcopy(v) for k, v in self._blocks.items()}
        clone._next_key = self._next_key
        return clone


_LEVEL_SHIFT = 56


def sfc_heap_key(code: tuple[int, ...], k: int, d: int) -> int:
    """Level-prefixed integer key of a cell code; distinct across levels."""
    base = k**d
    idx = 0
    for key in code:
        idx = idx * base + key
    return (len(code) << _LEVEL_SHIFT) | idx


@dataclass
class PatchBlock:
    """Regular Cartesian grid of unknowns embedded in one cell, with halo.

    ``values`` has shape (n + 2*halo,)*d; the interior is values[halo:-halo].
    """

    interior: tuple[int, ...]
    halo: int
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.halo < 1:
            raise ValueError("halo width must be >= 1")
        shape = tuple(n + 2 * self.halo for n in self.interior)
        if self.values is None:
            self.values = np.zeros(shape)
        elif tuple(self.values.shape) != shape:
            raise ValueError(f"values shape {self.values.shape} != {shape}")

    def interior_view(self) -> np.ndarray:
        sl = tuple(slice(self.halo, -self.halo) for _ in self.interior)
        return self.values[sl]
