"""Genotype trees: grammar, random generation and the variation operators.

A genotype is a binary tree of program symbols. SEQ and PAR nodes duplicate
a network cell (sequentially or in parallel) and carry the conv-block count
of the created child cell plus an optional block-drop decorator; END is a
no-op leaf that terminates a branch.

Textual grammar::

    node = "E" | op "(" int ["," "d=" real] ";" node "," node ")"
    op   = "S" | "P"

Example: ``S(5;P(3;E,E),S(2,d=0.2;E,E))``
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterator, Optional

MAX_DEPTH = 17
BLOCK_COUNT_MIN = 1
BLOCK_COUNT_MAX = 10
DROPOUT_MIN = 0.0
DROPOUT_MAX = 0.5
MUTATION_GROW_MIN = 1
MUTATION_GROW_MAX = 3

# Chance that a grow step emits END once the minimum depth is satisfied.
_GROW_END_PROB = 1.0 / 3.0

# Extra point re-draws before crossover/mutation fall back to parent copies.
_REDRAW_ATTEMPTS = 3


class GenotypeError(ValueError):
    """Structurally invalid genotype (arity, ranges, depth)."""


class GenotypeSyntaxError(GenotypeError):
    """Text does not conform to the genotype grammar."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TerminalRangeError(GenotypeSyntaxError):
    """A parsed terminal value is outside its legal range."""


class Symbol(Enum):
    SEQ = "S"
    PAR = "P"
    END = "E"


@dataclass(frozen=True)
class ProgramNode:
    """One program symbol.

    SEQ/PAR nodes carry the conv-block count of the child cell they create,
    an optional drop probability decorating that child, and two subtrees:
    ``left`` operates on the mother cell, ``right`` on the created child.
    END nodes carry nothing.
    """

    kind: Symbol
    block_count: Optional[int] = None
    dropout: Optional[float] = None
    left: Optional["ProgramNode"] = None
    right: Optional["ProgramNode"] = None

    def __post_init__(self):
        if self.kind is Symbol.END:
            if (
                self.block_count is not None
                or self.dropout is not None
                or self.left is not None
                or self.right is not None
            ):
                raise GenotypeError("END nodes carry no terminals and no children")
            return
        if self.left is None or self.right is None:
            raise GenotypeError(f"{self.kind.name} requires exactly two children")
        if not isinstance(self.block_count, int) or not (
            BLOCK_COUNT_MIN <= self.block_count <= BLOCK_COUNT_MAX
        ):
            raise GenotypeError(
                f"block count must be an integer in "
                f"[{BLOCK_COUNT_MIN}, {BLOCK_COUNT_MAX}], got {self.block_count!r}"
            )
        if self.dropout is not None and not (DROPOUT_MIN <= self.dropout <= DROPOUT_MAX):
            raise GenotypeError(
                f"dropout must lie in [{DROPOUT_MIN}, {DROPOUT_MAX}], got {self.dropout!r}"
            )

    @property
    def is_leaf(self) -> bool:
        return self.kind is Symbol.END


END_NODE = ProgramNode(Symbol.END)


def tree_depth(node: ProgramNode) -> int:
    """Depth of the subtree rooted at ``node`` (a leaf has depth 1)."""
    if node.is_leaf:
        return 1
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def node_count(node: ProgramNode) -> int:
    if node.is_leaf:
        return 1
    return 1 + node_count(node.left) + node_count(node.right)


def iter_nodes(node: ProgramNode, path: tuple = ()) -> Iterator[tuple[tuple, ProgramNode]]:
    """Preorder traversal yielding (path, node); path entries are 'L'/'R'."""
    yield path, node
    if not node.is_leaf:
        yield from iter_nodes(node.left, path + ("L",))
        yield from iter_nodes(node.right, path + ("R",))


def subtree_at(node: ProgramNode, path: tuple) -> ProgramNode:
    for step in path:
        node = node.left if step == "L" else node.right
    return node


def with_subtree(node: ProgramNode, path: tuple, new: ProgramNode) -> ProgramNode:
    """Copy of the tree with the subtree at ``path`` replaced by ``new``."""
    if not path:
        return new
    if path[0] == "L":
        return replace(node, left=with_subtree(node.left, path[1:], new))
    return replace(node, right=with_subtree(node.right, path[1:], new))


@dataclass(frozen=True)
class Genotype:
    root: ProgramNode

    def __post_init__(self):
        d = tree_depth(self.root)
        if d > MAX_DEPTH:
            raise GenotypeError(f"tree depth {d} exceeds the limit of {MAX_DEPTH}")

    @property
    def id(self) -> str:
        """Stable content hash of the canonical serialization."""
        return hashlib.sha256(serialize(self).encode("ascii")).hexdigest()[:16]

    @property
    def depth(self) -> int:
        return tree_depth(self.root)

    def __str__(self) -> str:
        return serialize(self)


def _format_real(x: float) -> str:
    # repr gives the shortest decimal that round-trips, which keeps the
    # serialization canonical and the content hash stable.
    return repr(float(x))


def _serialize_node(node: ProgramNode) -> str:
    if node.is_leaf:
        return "E"
    decorated = f",d={_format_real(node.dropout)}" if node.dropout is not None else ""
    return (
        f"{node.kind.value}({node.block_count}{decorated};"
        f"{_serialize_node(node.left)},{_serialize_node(node.right)})"
    )


def serialize(g: Genotype) -> str:
    """Canonical text form; ``parse(serialize(g))`` equals ``g``."""
    return _serialize_node(g.root)


_INT_RE = re.compile(r"\d+")
_REAL_RE = re.compile(r"\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def fail(self, message: str) -> None:
        raise GenotypeSyntaxError(message, self.pos)

    def expect(self, literal: str) -> None:
        if not self.text.startswith(literal, self.pos):
            self.fail(f"expected {literal!r}")
        self.pos += len(literal)

    def parse_node(self) -> ProgramNode:
        if self.pos >= len(self.text):
            self.fail("unexpected end of input")
        c = self.text[self.pos]
        if c == "E":
            self.pos += 1
            return END_NODE
        if c not in ("S", "P"):
            self.fail("expected 'E', 'S' or 'P'")
        kind = Symbol.SEQ if c == "S" else Symbol.PAR
        self.pos += 1
        self.expect("(")
        block_count = self.parse_int()
        dropout = None
        if self.text.startswith(",", self.pos):
            self.pos += 1
            self.expect("d=")
            dropout = self.parse_real()
        self.expect(";")
        left = self.parse_node()
        self.expect(",")
        right = self.parse_node()
        self.expect(")")
        return ProgramNode(kind, block_count, dropout, left, right)

    def parse_int(self) -> int:
        m = _INT_RE.match(self.text, self.pos)
        if m is None:
            self.fail("expected an integer block count")
        value = int(m.group())
        if not (BLOCK_COUNT_MIN <= value <= BLOCK_COUNT_MAX):
            raise TerminalRangeError(
                f"block count {value} outside [{BLOCK_COUNT_MIN}, {BLOCK_COUNT_MAX}]",
                self.pos,
            )
        self.pos = m.end()
        return value

    def parse_real(self) -> float:
        m = _REAL_RE.match(self.text, self.pos)
        if m is None:
            self.fail("expected a real dropout value")
        value = float(m.group())
        if not (DROPOUT_MIN <= value <= DROPOUT_MAX):
            raise TerminalRangeError(
                f"dropout {value} outside [{DROPOUT_MIN}, {DROPOUT_MAX}]", self.pos
            )
        self.pos = m.end()
        return value


def parse(text: str) -> Genotype:
    """Parse the canonical grammar; raises GenotypeSyntaxError with a byte offset."""
    parser = _Parser(text)
    root = parser.parse_node()
    if parser.pos != len(text):
        parser.fail("trailing characters after genotype")
    return Genotype(root)


def _grow(rng, depth: int, height: int, depth_min: int, p_decorate: float) -> ProgramNode:
    if depth == height:
        return END_NODE
    if depth >= depth_min and rng.random() < _GROW_END_PROB:
        return END_NODE
    kind = Symbol.SEQ if rng.random() < 0.5 else Symbol.PAR
    block_count = int(rng.integers(BLOCK_COUNT_MIN, BLOCK_COUNT_MAX + 1))
    dropout = None
    if rng.random() < p_decorate:
        dropout = float(rng.uniform(DROPOUT_MIN, DROPOUT_MAX))
    left = _grow(rng, depth + 1, height, depth_min, p_decorate)
    right = _grow(rng, depth + 1, height, depth_min, p_decorate)
    return ProgramNode(kind, block_count, dropout, left, right)


def random_genotype(
    rng,
    depth_min: int = 1,
    depth_max: int = 10,
    p_decorate: float = 0.1,
) -> Genotype:
    """Grow a random tree with depth in [depth_min, depth_max].

    Every SEQ/PAR draws its conv-block count uniformly from 1..10 and is
    decorated with probability ``p_decorate`` (decorator uniform in [0, 0.5]).
    """
    if not (1 <= depth_min <= depth_max <= MAX_DEPTH):
        raise GenotypeError(
            f"depth range [{depth_min}, {depth_max}] must satisfy "
            f"1 <= min <= max <= {MAX_DEPTH}"
        )
    height = int(rng.integers(depth_min, depth_max + 1))
    return Genotype(_grow(rng, 1, height, depth_min, p_decorate))


def _choose_path(rng, root: ProgramNode) -> tuple:
    paths = [p for p, _ in iter_nodes(root)]
    return paths[int(rng.integers(0, len(paths)))]


def crossover(a: Genotype, b: Genotype, rng, depth_max: int = MAX_DEPTH):
    """Single-point subtree exchange producing two offspring.

    If either offspring would exceed ``depth_max`` the points are re-drawn
    up to three times; after that both parents are returned unchanged, which
    also keeps the combined node count conserved in every outcome.
    """
    for _ in range(1 + _REDRAW_ATTEMPTS):
        path_a = _choose_path(rng, a.root)
        path_b = _choose_path(rng, b.root)
        sub_a = subtree_at(a.root, path_a)
        sub_b = subtree_at(b.root, path_b)
        child_a = with_subtree(a.root, path_a, sub_b)
        child_b = with_subtree(b.root, path_b, sub_a)
        if tree_depth(child_a) <= depth_max and tree_depth(child_b) <= depth_max:
            return Genotype(child_a), Genotype(child_b)
    return Genotype(a.root), Genotype(b.root)


def mutate(
    g: Genotype,
    rng,
    p_decorate: float = 0.1,
    depth_max: int = MAX_DEPTH,
) -> Genotype:
    """Replace one uniformly chosen subtree with a freshly grown one.

    The replacement is grown with depth 1..3. The same re-draw-then-copy
    policy as crossover enforces the depth limit.
    """
    for _ in range(1 + _REDRAW_ATTEMPTS):
        path = _choose_path(rng, g.root)
        height = int(rng.integers(MUTATION_GROW_MIN, MUTATION_GROW_MAX + 1))
        grown = _grow(rng, 1, height, 1, p_decorate)
        new_root = with_subtree(g.root, path, grown)
        if tree_depth(new_root) <= depth_max:
            return Genotype(new_root)
    return Genotype(g.root)
