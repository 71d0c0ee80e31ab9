"""The linearized spacetree as persistent data.

Structure is two bits per cell (refined, change requested) in linearization
order; everything else — positions, extents, adjacency — is derivable from
the ordering. Vertices are unique by (position, level); several vertices may
coincide spatially while living on different levels. Hanging vertices (fewer
same-level adjacent cells than the boundary-adjusted expectation) are never
stored: they are transient objects recreated by the traversal.
"""

from __future__ import annotations

import enum
import itertools
import struct
from dataclasses import dataclass, field

from . import sfc
from .sfc import Code, ROOT, TraversalOrder
from .storage import FieldSchema, Heap

VertexKey = tuple[int, tuple[int, ...]]  # (level, integer coords at that level)

_MAGIC = b"SPTR"
_VERSION = 1


class Change(enum.Enum):
    NONE = 0
    REFINE = 1
    ERASE = 2


class TreeConsistencyError(RuntimeError):
    pass


@dataclass
class CellRecord:
    refined: bool = False
    data: list = field(default_factory=list)
    heap_key: int | None = None


@dataclass
class VertexRecord:
    key: VertexKey
    refinement_flag: bool = False
    adjacent_cells: int = 0
    data: list = field(default_factory=list)
    heap_key: int | None = None

    @property
    def level(self) -> int:
        return self.key[0]

    @property
    def coords(self) -> tuple[int, ...]:
        return self.key[1]


class Spacetree:
    """Persistent grid state between two traversals."""

    def __init__(self, d: int, k: int, curve: str = "morton",
                 order: TraversalOrder = TraversalOrder.DFS):
        if d < 2:
            raise ValueError("dimension must be >= 2")
        if k not in (2, 3):
            raise ValueError("partitioning must be 2 or 3")
        self.d = d
        self.k = k
        self.curve = sfc.make_curve(curve, d, k)
        self.order = order
        self.direction = 1
        self.cells: dict[Code, CellRecord] = {}
        self.vertices: dict[VertexKey, VertexRecord] = {}
        self.vertex_fields = FieldSchema("vertex")
        self.cell_fields = FieldSchema("cell")
        self.heap = Heap()
        self.pending: dict[Code, Change] = {}
        self.markers: dict[Code, int] = {}
        self.labels: dict[Code, str] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def degenerate(cls, d: int, k: int, curve: str = "morton",
                   order: TraversalOrder = TraversalOrder.DFS) -> "Spacetree":
        """The unit hypercube as an unrefined root cell."""
        tree = cls(d, k, curve, order)
        tree.cells[ROOT] = CellRecord(data=tree.cell_fields.defaults())
        tree._rebuild_vertices()
        return tree

    @classmethod
    def from_fixture(cls, fixture, curve: str = "morton",
                     order: TraversalOrder = TraversalOrder.DFS) -> "Spacetree":
        """Build from a labeled fixture tree (object, bundled name or path)."""
        if isinstance(fixture, str):
            fixture = sfc.load_fixture(fixture)
        tree = cls(fixture.d, fixture.k, curve, order)
        for label, code in sfc.iter_codes(fixture):
            rec = CellRecord(refined=fixture.is_refined(label),
                             data=tree.cell_fields.defaults())
            tree.cells[code] = rec
            tree.labels[code] = label
        tree._rebuild_vertices()
        return tree

    def _rebuild_vertices(self) -> None:
        """Enumerate persistent vertices; hanging ones are never stored."""
        old = self.vertices
        self.vertices = {}
        for code in self.cells:
            for key in self.corners_of(code):
                if key in self.vertices:
                    continue
                adj = len(self.cells_at_vertex(key))
                if adj >= self.expected_adjacent(key):
                    rec = old.get(key)
                    if rec is None:
                        rec = VertexRecord(key, data=self.vertex_fields.defaults())
                    rec.adjacent_cells = adj
                    self.vertices[key] = rec

    def init_payload(self) -> None:
        """Re-seed all records with schema defaults (call after registering fields)."""
        for rec in self.cells.values():
            rec.data = self.cell_fields.defaults()
        for rec in self.vertices.values():
            rec.data = self.vertex_fields.defaults()

    # -- geometry -----------------------------------------------------------

    def level_extent(self, level: int) -> int:
        return self.k**level

    def corners_of(self, code: Code) -> list[VertexKey]:
        """Corner vertex keys in corner-index order (axis 0 least significant)."""
        level = len(code)
        base = sfc.cell_coords(code, self.k, self.d)
        out = []
        for idx in range(2**self.d):
            coords = tuple(base[ax] + ((idx >> ax) & 1) for ax in range(self.d))
            out.append((level, coords))
        return out

    def child_grid_keys(self, code: Code) -> list[VertexKey]:
        """The (k+1)^d vertex keys of the child grid, lexicographic order."""
        level = len(code)
        base = [c * self.k for c in sfc.cell_coords(code, self.k, self.d)]
        ranges = [range(self.k + 1) for _ in range(self.d)]
        out = []
        for offs in itertools.product(*reversed(ranges)):
            offs = tuple(reversed(offs))
            out.append((level + 1, tuple(base[ax] + offs[ax] for ax in range(self.d))))
        return out

    def cell_slots_at_vertex(self, key: VertexKey) -> list[Code]:
        """All potential same-level cells around a vertex, inside the domain."""
        level, coords = key
        top = self.level_extent(level)
        slots = []
        axes_opts = []
        for ax in range(self.d):
            opts = [c for c in (coords[ax] - 1, coords[ax]) if 0 <= c < top]
            axes_opts.append(opts)
        for combo in itertools.product(*axes_opts):
            slots.append(sfc.code_from_coords(level, combo, self.k, self.d))
        return slots

    def cells_at_vertex(self, key: VertexKey) -> list[Code]:
        return [c for c in self.cell_slots_at_vertex(key) if c in self.cells]

    def expected_adjacent(self, key: VertexKey) -> int:
        """Boundary-adjusted full adjacency count for a non-hanging vertex."""
        level, coords = key
        top = self.level_extent(level)
        expected = 1
        for ax in range(self.d):
            expected *= 1 if coords[ax] in (0, top) else 2
        return expected

    def is_hanging(self, key: VertexKey) -> bool:
        return len(self.cells_at_vertex(key)) < self.expected_adjacent(key)

    def classify_vertex(self, key: VertexKey) -> str:
        if not self.cells_at_vertex(key):
            raise TreeConsistencyError(f"vertex {key} has no adjacent cells")
        return "hanging" if self.is_hanging(key) else "persistent"

    def vertex_position(self, key: VertexKey) -> tuple[float, ...]:
        level, coords = key
        scale = float(self.level_extent(level))
        return tuple(c / scale for c in coords)

    def parent_of(self, code: Code) -> Code | None:
        return code[:-1] if code else None

    def children_of(self, code: Code) -> list[Code]:
        return [code + (key,) for key in range(self.k**self.d)]

    def is_refined(self, code: Code) -> bool:
        return self.cells[code].refined

    def leaves(self) -> list[Code]:
        return [c for c, rec in self.cells.items() if not rec.refined]

    def subtree_codes(self, root: Code) -> list[Code]:
        """All cells of the subtree rooted at `root`, DFS in key order."""
        out = []

        def rec(code):
            out.append(code)
            if self.cells[code].refined:
                for child in self.children_of(code):
                    rec(child)

        rec(root)
        return out

    # -- commands -----------------------------------------------------------

    def request_refine(self, code: Code) -> None:
        if code not in self.cells:
            raise KeyError(f"no cell {code}")
        if not self.cells[code].refined and self.pending.get(code) != Change.ERASE:
            self.pending[code] = Change.REFINE

    def request_erase(self, code: Code) -> None:
        if code == ROOT:
            raise ValueError("the root cell cannot be erased")
        if code not in self.cells:
            raise KeyError(f"no cell {code}")
        if self.cells[code].refined:
            self.pending[code] = Change.ERASE

    # -- consistency --------------------------------------------------------

    def check_invariants(self) -> None:
        refined = sum(1 for rec in self.cells.values() if rec.refined)
        if len(self.cells) != 1 + self.k**self.d * refined:
            raise TreeConsistencyError("cell count != 1 + k^d * refined count")
        for code, rec in self.cells.items():
            if rec.refined:
                for child in self.children_of(code):
                    if child not in self.cells:
                        raise TreeConsistencyError(f"missing child {child}")
            elif code + (0,) in self.cells:
                raise TreeConsistencyError(f"leaf {code} has children")
        for key, rec in self.vertices.items():
            if self.is_hanging(key):
                raise TreeConsistencyError(f"hanging vertex {key} persisted")
            if rec.adjacent_cells != len(self.cells_at_vertex(key)):
                raise TreeConsistencyError(f"stale adjacency count at {key}")
        # or-based refinement: a flagged vertex implies refined/pending cells
        for key, rec in self.vertices.items():
            if rec.refinement_flag:
                for code in self.cells_at_vertex(key):
                    cell = self.cells[code]
                    if not cell.refined and self.pending.get(code) != Change.REFINE:
                        raise TreeConsistencyError(
                            f"refinement flag at {key} but cell {code} is a leaf")

    # -- copies -------------------------------------------------------------

    def copy(self) -> "Spacetree":
        import copy as _copy

        clone = Spacetree.__new__(Spacetree)
        clone.d, clone.k = self.d, self.k
        clone.curve = self.curve
        clone.order = self.order
        clone.direction = self.direction
        clone.cells = {
            c: CellRecord(r.refined, list(r.data), r.heap_key)
            for c, r in self.cells.items()
        }
        clone.vertices = {
            key: VertexRecord(key, r.refinement_flag, r.adjacent_cells,
                              list(r.data), r.heap_key)
            for key, r in self.vertices.items()
        }
        clone.vertex_fields = self.vertex_fields
        clone.cell_fields = self.cell_fields
        clone.heap = self.heap.copy()
        clone.pending = dict(self.pending)
        clone.markers = dict(self.markers)
        clone.labels = dict(self.labels)
        return clone

    def format_code(self, code: Code) -> str:
        return sfc.format_code(code, self.k, self.d)


# --------------------------------------------------------------------------
# Linearization plans (stream orders)
# --------------------------------------------------------------------------

def cell_linearization(tree: Spacetree, order: TraversalOrder | None = None,
                       direction: int | None = None) -> list[Code]:
    """Stream order of all cell records for the given traversal scheme."""
    order = order or tree.order
    direction = direction if direction is not None else tree.direction

    def kids(code, state):
        pairs = tree.curve.children(state)
        if direction < 0:
            pairs = list(reversed(pairs))
        return [(code + (key,), cs) for key, cs in pairs]

    out: list[Code] = []
    if order is TraversalOrder.DFS:

        def dfs(code, state):
            out.append(code)
            if tree.cells[code].refined:
                for child, cs in kids(code, state):
                    dfs(child, cs)

        dfs(ROOT, tree.curve.initial_state())
    elif order is TraversalOrder.LEVELWISE_DFS:

        def lw(code, state, emit):
            if emit:
                out.append(code)
            if tree.cells[code].refined:
                ordered = kids(code, state)
                out.extend(child for child, _ in ordered)
                for child, cs in ordered:
                    lw(child, cs, False)

        lw(ROOT, tree.curve.initial_state(), True)
    elif order is TraversalOrder.BFS:
        queue = [(ROOT, tree.curve.initial_state())]
        while queue:
            code, state = queue.pop(0)
            out.append(code)
            if tree.cells[code].refined:
                queue.extend(kids(code, state))
    else:  # pragma: no cover
        raise ValueError(order)
    return out


def vertex_linearization(tree: Spacetree, direction: int | None = None
                         ) -> tuple[list[VertexKey], list[VertexKey]]:
    """(first-touch order, last-touch order) of persistent vertex records.

    This mirrors the traversal automaton on static structure: a vertex is
    read just before the enter of its first adjacent cell in visit order and
    written right after the leave of its last one. DFS and level-wise DFS
    need records in the same order.
    """
    direction = direction if direction is not None else tree.direction
    first: list[VertexKey] = []
    last: list[VertexKey] = []
    touched: set[VertexKey] = set()
    left: set[VertexKey] = set()
    remaining: dict[VertexKey, int] = {}

    def corner_iter(code, reverse=False):
        corners = tree.corners_of(code)
        if (direction < 0) != reverse:
            corners = list(reversed(corners))
        return corners

    def visit(code, state):
        for key in corner_iter(code):
            if key in tree.vertices and key not in touched:
                touched.add(key)
                first.append(key)
                remaining[key] = len(tree.cells_at_vertex(key))
        if tree.cells[code].refined:
            pairs = tree.curve.children(state)
            if direction < 0:
                pairs = list(reversed(pairs))
            for key, cs in pairs:
                visit(code + (key,), cs)
        for key in corner_iter(code, reverse=True):
            if key in tree.vertices and key not in left:
                remaining[key] -= 1
                if remaining[key] == 0:
                    left.add(key)
                    last.append(key)

    visit(ROOT, tree.curve.initial_state())
    return first, last


# --------------------------------------------------------------------------
# Byte-exact serialization
# --------------------------------------------------------------------------
#
# Layout (little endian):
#   magic "SPTR" | u8 version | u8 d | u8 k | u8 flags | u8 order | i8 dir
#   u8 curve-name length | curve name
#   u32 cell count | u32 vertex count
#   u32 manifest length | manifest utf8 (field registrations, both kinds)
#   structure section: ceil(2n/8) bytes (1 bit/cell if frozen: ceil(n/8))
#   per cell (linearization order): payload record | i64 heap key
#   per vertex (first-touch order): u8 level | u32*d coords | u8 flag |
#       payload record | i64 heap key
#   if flags & 1: markers, i16 per cell (-1 encodes "no marker")
#   if flags & 2: labels, u8 len + ascii per cell

def structure_bits(tree: Spacetree, frozen: bool = False) -> bytes:
    """The structure section alone: 2 bits per cell, 1 if adaptivity is frozen."""
    order = cell_linearization(tree)
    bits = []
    for code in order:
        bits.append(1 if tree.cells[code].refined else 0)
        if not frozen:
            bits.append(1 if code in tree.pending else 0)
    out = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def serialize(tree: Spacetree, frozen: bool = False) -> bytes:
    from .storage import dump_manifest

    flags = (1 if tree.markers else 0) | (2 if tree.labels else 0) | (4 if frozen else 0)
    order_id = [TraversalOrder.DFS, TraversalOrder.LEVELWISE_DFS,
                TraversalOrder.BFS].index(tree.order)
    head = bytearray()
    head += _MAGIC
    head += struct.pack("<BBBBBb", _VERSION, tree.d, tree.k, flags, order_id,
                        tree.direction)
    name = tree.curve.name.encode()
    head += struct.pack("<B", len(name)) + name
    cell_order = cell_linearization(tree)
    vfirst, _ = vertex_linearization(tree)
    head += struct.pack("<II", len(cell_order), len(vfirst))
    manifest = dump_manifest([tree.vertex_fields, tree.cell_fields]).encode()
    head += struct.pack("<I", len(manifest)) + manifest

    body = bytearray(structure_bits(tree, frozen))
    for code in cell_order:
        rec = tree.cells[code]
        body += tree.cell_fields.pack(rec.data)
        body += struct.pack("<q", -1 if rec.heap_key is None else rec.heap_key)
    for key in vfirst:
        rec = tree.vertices[key]
        level, coords = key
        body += struct.pack("<B", level)
        body += struct.pack(f"<{tree.d}I", *coords)
        body += struct.pack("<B", 1 if rec.refinement_flag else 0)
        body += tree.vertex_fields.pack(rec.data)
        body += struct.pack("<q", -1 if rec.heap_key is None else rec.heap_key)
    if flags & 1:
        for code in cell_order:
            body += struct.pack("<h", tree.markers.get(code, -1))
    if flags & 2:
        for code in cell_order:
            label = tree.labels.get(code, "").encode()
            body += struct.pack("<B", len(label)) + label
    return bytes(head + body)


def deserialize(blob: bytes) -> Spacetree:
    view = memoryview(blob)
    if view[:4].tobytes() != _MAGIC:
        raise ValueError("bad magic tag")
    version, d, k, flags, order_id, direction = struct.unpack_from("<BBBBBb", view, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported version {version}")
    pos = 10
    (nlen,) = struct.unpack_from("<B", view, pos)
    pos += 1
    curve_name = view[pos:pos + nlen].tobytes().decode()
    pos += nlen
    ncells, nverts = struct.unpack_from("<II", view, pos)
    pos += 8
    (mlen,) = struct.unpack_from("<I", view, pos)
    pos += 4
    manifest = view[pos:pos + mlen].tobytes().decode()
    pos += mlen

    order = [TraversalOrder.DFS, TraversalOrder.LEVELWISE_DFS,
             TraversalOrder.BFS][order_id]
    tree = Spacetree(d, k, curve_name, order)
    tree.direction = direction
    vlines = [l for l in manifest.splitlines() if l.startswith("vertex.")]
    clines = [l for l in manifest.splitlines() if l.startswith("cell.")]
    tree.vertex_fields = FieldSchema.from_manifest_lines("vertex", vlines)
    tree.cell_fields = FieldSchema.from_manifest_lines("cell", clines)

    frozen = bool(flags & 4)
    bits_per_cell = 1 if frozen else 2
    sec_len = (bits_per_cell * ncells + 7) // 8
    sec = view[pos:pos + sec_len]
    pos += sec_len

    def bit(i):
        return (sec[i // 8] >> (i % 8)) & 1

    # rebuild structure by replaying the linearization
    refined_bits = [bool(bit(bits_per_cell * i)) for i in range(ncells)]
    change_bits = [bool(bit(bits_per_cell * i + 1)) if not frozen else False
                   for i in range(ncells)]
    cursor = {"i": 0}

    def build(code, state):
        i = cursor["i"]
        cursor["i"] += 1
        tree.cells[code] = CellRecord(refined=refined_bits[i])
        if change_bits[i]:
            tree.pending[code] = Change.ERASE if refined_bits[i] else Change.REFINE
        if refined_bits[i]:
            pairs = tree.curve.children(state)
            if direction < 0:
                pairs = list(reversed(pairs))
            for key, cs in pairs:
                build(code + (key,), cs)

    if order is TraversalOrder.DFS:
        build(ROOT, tree.curve.initial_state())
    else:
        # generic replay: construct via repeated expansion in the stored order
        tree.cells[ROOT] = CellRecord(refined=refined_bits[0])
        if change_bits[0]:
            tree.pending[ROOT] = Change.ERASE if refined_bits[0] else Change.REFINE
        states = {ROOT: tree.curve.initial_state()}
        emitted = 1
        frontier = [ROOT] if refined_bits[0] else []
        if order is TraversalOrder.LEVELWISE_DFS:
            def expand(code):
                nonlocal emitted
                pairs = tree.curve.children(states[code])
                if direction < 0:
                    pairs = list(reversed(pairs))
                children = []
                for key, cs in pairs:
                    child = code + (key,)
                    states[child] = cs
                    tree.cells[child] = CellRecord(refined=refined_bits[emitted])
                    if change_bits[emitted]:
                        tree.pending[child] = (Change.ERASE
                                               if refined_bits[emitted]
                                               else Change.REFINE)
                    children.append((child, refined_bits[emitted]))
                    emitted += 1
                for child, refined in children:
                    if refined:
                        expand(child)

            if refined_bits[0]:
                expand(ROOT)
        else:  # BFS
            while frontier:
                code = frontier.pop(0)
                pairs = tree.curve.children(states[code])
                if direction < 0:
                    pairs = list(reversed(pairs))
                for key, cs in pairs:
                    child = code + (key,)
                    states[child] = cs
                    tree.cells[child] = CellRecord(refined=refined_bits[emitted])
                    if change_bits[emitted]:
                        tree.pending[child] = (Change.ERASE
                                               if refined_bits[emitted]
                                               else Change.REFINE)
                    if refined_bits[emitted]:
                        frontier.append(child)
                    emitted += 1

    cell_order = cell_linearization(tree)
    csize = tree.cell_fields.record_size
    for code in cell_order:
        rec = tree.cells[code]
        rec.data = tree.cell_fields.unpack(view[pos:pos + csize].tobytes())
        pos += csize
        (hk,) = struct.unpack_from("<q", view, pos)
        pos += 8
        rec.heap_key = None if hk == -1 else hk

    vsize = tree.vertex_fields.record_size
    for _ in range(nverts):
        (level,) = struct.unpack_from("<B", view, pos)
        pos += 1
        coords = struct.unpack_from(f"<{d}I", view, pos)
        pos += 4 * d
        (flag,) = struct.unpack_from("<B", view, pos)
        pos += 1
        data = tree.vertex_fields.unpack(view[pos:pos + vsize].tobytes())
        pos += vsize
        (hk,) = struct.unpack_from("<q", view, pos)
        pos += 8
        key = (level, tuple(coords))
        rec = VertexRecord(key, bool(flag), 0, data,
                           None if hk == -1 else hk)
        rec.adjacent_cells = len(tree.cells_at_vertex(key))
        tree.vertices[key] = rec
    if flags & 1:
        for code in cell_order:
            (m,) = struct.unpack_from("<h", view, pos)
            pos += 2
            if m >= 0:
                tree.markers[code] = m
    if flags & 2:
        for code in cell_order:
            (llen,) = struct.unpack_from("<B", view, pos)
            pos += 1
            if llen:
                tree.labels[code] = view[pos:pos + llen].tobytes().decode()
            pos += llen
    return tree
