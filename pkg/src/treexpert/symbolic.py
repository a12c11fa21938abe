"""Discrete binary trees, their s-expression form, and the car/cdr/cons
interpreter used as ground truth for the tensor machinery.

A tree is one of ``Leaf``, ``Node`` or the ``EMPTY`` sentinel.  ``EMPTY`` is
what ``car``/``cdr`` of a leaf returns; it is the symbolic twin of the zero
tensor.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

from .errors import ParseError, ProgramError


class _Empty:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "EMPTY"

    def __reduce__(self):
        return (_Empty, ())


EMPTY = _Empty()


@dataclass(frozen=True)
class Leaf:
    label: str

    def __str__(self) -> str:
        return to_sexpr(self)


@dataclass(frozen=True)
class Node:
    label: str | None
    left: "Tree"
    right: "Tree"

    def __post_init__(self):
        if self.left is EMPTY or self.right is EMPTY:
            raise ValueError("Node children must be non-empty trees")

    def __str__(self) -> str:
        return to_sexpr(self)


Tree = Union[Leaf, Node, _Empty]


# ---------------------------------------------------------------------------
# s-expressions

def _tokens(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_sexpr(text: str) -> Tree:
    """Parse ``(label left right)``, ``(left right)``, bare atoms, or ``()``."""
    toks = _tokens(text)
    if not toks:
        raise ParseError("empty input")
    tree, pos = _parse(toks, 0)
    if pos != len(toks):
        raise ParseError(f"trailing input after position {pos}: {' '.join(toks[pos:pos + 3])!r}")
    return tree


def _parse(toks: list[str], pos: int) -> tuple[Tree, int]:
    if pos >= len(toks):
        raise ParseError("unexpected end of input")
    tok = toks[pos]
    if tok == ")":
        raise ParseError("unbalanced ')'")
    if tok != "(":
        return Leaf(tok), pos + 1
    pos += 1
    items: list[Tree] = []
    while True:
        if pos >= len(toks):
            raise ParseError("list not closed")
        if toks[pos] == ")":
            pos += 1
            break
        item, pos = _parse(toks, pos)
        items.append(item)
    if not items:
        return EMPTY, pos
    if len(items) == 2:
        return Node(None, items[0], items[1]), pos
    if len(items) == 3:
        if not isinstance(items[0], Leaf):
            raise ParseError("node label must be an atom")
        return Node(items[0].label, items[1], items[2]), pos
    raise ParseError(f"a node needs 2 children (optionally preceded by a label), got {len(items)} items")


def to_sexpr(tree: Tree) -> str:
    if tree is EMPTY:
        return "()"
    if isinstance(tree, Leaf):
        return tree.label
    parts = [to_sexpr(tree.left), to_sexpr(tree.right)]
    if tree.label is not None:
        parts.insert(0, tree.label)
    return "(" + " ".join(parts) + ")"


# ---------------------------------------------------------------------------
# structural helpers

def depth(tree: Tree) -> int:
    """Depth of the deepest node; a single leaf has depth 0, EMPTY has -1."""
    if tree is EMPTY:
        return -1
    if isinstance(tree, Leaf):
        return 0
    return 1 + max(depth(tree.left), depth(tree.right))


def size(tree: Tree) -> int:
    if tree is EMPTY:
        return 0
    if isinstance(tree, Leaf):
        return 1
    return 1 + size(tree.left) + size(tree.right)


def iter_nodes(tree: Tree, path: str = "") -> Iterator[tuple[str, Tree]]:
    """Yield ``(path, subtree)`` pairs in pre-order; "0" is left, "1" is right."""
    if tree is EMPTY:
        return
    yield path, tree
    if isinstance(tree, Node):
        yield from iter_nodes(tree.left, path + "0")
        yield from iter_nodes(tree.right, path + "1")


def labels(tree: Tree) -> list[str]:
    return [t.label for _, t in iter_nodes(tree) if t.label is not None]


def leaf_labels(tree: Tree) -> list[str]:
    return [t.label for _, t in iter_nodes(tree) if isinstance(t, Leaf)]


def subtree_at(tree: Tree, path: str) -> Tree:
    for bit in path:
        tree = sym_car(tree) if bit == "0" else sym_cdr(tree)
    return tree


def subtrees(tree: Tree) -> set[Tree]:
    return {t for _, t in iter_nodes(tree)}


# ---------------------------------------------------------------------------
# Lisp primitives

def sym_car(tree: Tree) -> Tree:
    return tree.left if isinstance(tree, Node) else EMPTY


def sym_cdr(tree: Tree) -> Tree:
    return tree.right if isinstance(tree, Node) else EMPTY


def sym_cons(t0: Tree, t1: Tree, root: str | None) -> Tree:
    """Assemble ``(root t0 t1)``.

    Two empty arguments give ``Leaf(root)`` (or EMPTY when ``root`` is None),
    matching ``cons(0, 0, s) = s (x) r_root``.  Exactly one empty argument has
    no binary-tree reading and raises ProgramError.
    """
    if t0 is EMPTY and t1 is EMPTY:
        return EMPTY if root is None else Leaf(root)
    if t0 is EMPTY or t1 is EMPTY:
        raise ProgramError("cons with exactly one empty argument is not a binary tree")
    return Node(root, t0, t1)


def root_label(tree: Tree) -> str | None:
    return None if tree is EMPTY else tree.label


def mirror(tree: Tree) -> Tree:
    if isinstance(tree, Node):
        return Node(tree.label, mirror(tree.right), mirror(tree.left))
    return tree


# ---------------------------------------------------------------------------
# programs

@dataclass(frozen=True)
class Car:
    arg: int


@dataclass(frozen=True)
class Cdr:
    arg: int


@dataclass(frozen=True)
class Cons:
    arg0: int
    arg1: int
    root: str | None


Instruction = Union[Car, Cdr, Cons]
LispProgram = list  # list[Instruction]


def trace_program(program: Sequence[Instruction], source: Tree) -> list[Tree]:
    """Execute ``program`` and return every tree, starting with ``source``."""
    trees: list[Tree] = [source]
    for step, ins in enumerate(program):
        n = len(trees)
        if isinstance(ins, (Car, Cdr)):
            if not 0 <= ins.arg < n:
                raise ProgramError(f"step {step}: argument index {ins.arg} out of range (have {n} trees)")
            op = sym_car if isinstance(ins, Car) else sym_cdr
            trees.append(op(trees[ins.arg]))
        elif isinstance(ins, Cons):
            for a in (ins.arg0, ins.arg1):
                if not 0 <= a < n:
                    raise ProgramError(f"step {step}: argument index {a} out of range (have {n} trees)")
            trees.append(sym_cons(trees[ins.arg0], trees[ins.arg1], ins.root))
        else:
            raise ProgramError(f"step {step}: unknown instruction {ins!r}")
    return trees


def run_program(program: Sequence[Instruction], source: Tree) -> Tree:
    return trace_program(program, source)[-1]


def program_to_json(program: Sequence[Instruction]) -> list[dict]:
    out = []
    for ins in program:
        if isinstance(ins, Car):
            out.append({"op": "car", "arg": ins.arg})
        elif isinstance(ins, Cdr):
            out.append({"op": "cdr", "arg": ins.arg})
        else:
            out.append({"op": "cons", "args": [ins.arg0, ins.arg1], "root": ins.root})
    return out


def program_from_json(items: list[dict] | str) -> list[Instruction]:
    if isinstance(items, str):
        items = json.loads(items)
    program: list[Instruction] = []
    for i, item in enumerate(items):
        op = item.get("op")
        try:
            if op == "car":
                program.append(Car(int(item["arg"])))
            elif op == "cdr":
                program.append(Cdr(int(item["arg"])))
            elif op == "cons":
                a0, a1 = item["args"]
                program.append(Cons(int(a0), int(a1), item.get("root")))
            else:
                raise ProgramError(f"instruction {i}: unknown op {op!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise ProgramError(f"instruction {i}: malformed {item!r}") from exc
    return program


def mirror_program(tree: Tree) -> list[Instruction]:
    """A car/cdr/cons program computing ``mirror(tree)``: three steps per
    internal node.  Not necessarily shortest; see ``min_reversal_steps``."""
    program: list[Instruction] = []

    def build(index: int, t: Tree) -> int:
        if not isinstance(t, Node):
            return index
        program.append(Car(index))
        left = len(program)
        program.append(Cdr(index))
        right = len(program)
        new_right = build(left, t.left)
        new_left = build(right, t.right)
        program.append(Cons(new_left, new_right, t.label))
        return len(program)

    build(0, tree)
    return program


class StepsAtLeast(int):
    """Returned by ``min_reversal_steps`` when the search budget ran out; the
    true minimum is at least this value."""

    def __repr__(self) -> str:
        return f">={int(self)}"


def min_reversal_steps(tree: Tree, max_len: int = 12, max_nodes: int = 7) -> int:
    """Length of a shortest car/cdr/cons program whose last tree is
    ``mirror(tree)``.

    Breadth-first search over the *set* of available trees.  Two prunings keep
    it exact: car/cdr only ever yield subtrees of the input (or EMPTY), and a
    cons result that is not a subtree of the goal can never help (its car/cdr
    are its arguments, which were already available).  Leaves may also be
    minted as ``cons(EMPTY, EMPTY, label)``.  Beyond ``max_nodes`` nodes or
    ``max_len`` steps a ``StepsAtLeast`` bound is returned instead.
    """
    goal = mirror(tree)
    if goal == tree:
        return 0
    if size(tree) > max_nodes:
        return StepsAtLeast(0)
    goal_parts = subtrees(goal)
    start = frozenset([tree])
    frontier = [start]
    seen = {start}
    for steps in range(1, max_len + 1):
        nxt = []
        for avail in frontier:
            for new in _successors(avail, goal_parts):
                if new == goal:
                    return steps
                state = avail | {new}
                if state not in seen:
                    seen.add(state)
                    nxt.append(state)
        frontier = nxt
        if not frontier:
            break
    return StepsAtLeast(max_len + 1)


def _successors(avail: frozenset, goal_parts: set) -> Iterator[Tree]:
    for t in avail:
        if isinstance(t, Node):
            for child in (t.left, t.right):
                if child not in avail:
                    yield child
        elif isinstance(t, Leaf) and EMPTY not in avail:
            yield EMPTY
    for t in goal_parts:
        if t in avail:
            continue
        if isinstance(t, Node) and t.left in avail and t.right in avail:
            yield t
        elif isinstance(t, Leaf) and EMPTY in avail:
            yield t


def breadth_first(tree: Tree) -> list[tuple[str, Tree]]:
    queue = deque([("", tree)])
    out = []
    while queue:
        path, t = queue.popleft()
        if t is EMPTY:
            continue
        out.append((path, t))
        if isinstance(t, Node):
            queue.append((path + "0", t.left))
            queue.append((path + "1", t.right))
    return out
