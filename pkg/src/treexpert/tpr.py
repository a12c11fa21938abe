"""Tensor product representations of binary trees.

A tree becomes a ``filler_dim x num_roles`` matrix ``T = sum_n f_n r_n^T``.
Roles are one-hot vectors indexed breadth-first (heap order: root 0, left
child of i is 2i+1, right child 2i+2), so every operator below is an exact
0/1 matrix and recall ``T r`` is a column lookup.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, DecodeError, RoleLookupError, VocabularyError
from .symbolic import EMPTY, Leaf, Node, Tree, iter_nodes

MAX_DEPTH_LIMIT = 12


@dataclass(frozen=True)
class RoleBasis:
    max_depth: int
    paths: tuple[str, ...] = field(repr=False)

    @property
    def num_roles(self) -> int:
        return len(self.paths)

    def index(self, path: str) -> int:
        if len(path) > self.max_depth or any(c not in "01" for c in path):
            raise RoleLookupError(f"path {path!r} is not a role for max_depth={self.max_depth}")
        return (1 << len(path)) - 1 + (int(path, 2) if path else 0)

    def vector(self, path: str) -> np.ndarray:
        r = np.zeros(self.num_roles)
        r[self.index(path)] = 1.0
        return r

    def depth_of(self, index: int) -> int:
        return len(self.paths[index])


def build_role_basis(max_depth: int) -> RoleBasis:
    if not isinstance(max_depth, (int, np.integer)) or not 1 <= max_depth <= MAX_DEPTH_LIMIT:
        raise ConfigError(f"max_depth must be an integer in [1, {MAX_DEPTH_LIMIT}], got {max_depth!r}")
    paths = [""]
    for length in range(1, max_depth + 1):
        paths.extend(format(v, f"0{length}b") for v in range(1 << length))
    return RoleBasis(int(max_depth), tuple(paths))


@dataclass(frozen=True)
class FillerTable:
    vocab: tuple[str, ...]
    embeddings: np.ndarray = field(repr=False)
    empty_norm_threshold: float = 0.25
    match_threshold: float = 0.5

    def __post_init__(self):
        if len(set(self.vocab)) != len(self.vocab):
            raise ConfigError("vocabulary contains duplicates")
        if self.embeddings.shape[0] != len(self.vocab):
            raise ConfigError("one embedding row per vocabulary item is required")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.vocab)})
        self.embeddings.setflags(write=False)

    @property
    def filler_dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise VocabularyError(f"label {label!r} is not in the vocabulary") from None

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def embedding(self, label: str) -> np.ndarray:
        return self.embeddings[self.index(label)]

    def max_cosine(self) -> float:
        g = self.embeddings @ self.embeddings.T
        np.fill_diagonal(g, -np.inf)
        return float(g.max()) if len(self.vocab) > 1 else -1.0

    def vocab_hash(self) -> str:
        return hashlib.sha256(json.dumps(list(self.vocab)).encode()).hexdigest()


def build_filler_table(vocab, filler_dim: int, seed: int = 0, *,
                       empty_norm_threshold: float = 0.25,
                       match_threshold: float = 0.5,
                       max_tries: int = 10_000) -> FillerTable:
    """Random unit fillers, each redrawn until its cosine with every earlier
    filler is below ``match_threshold``."""
    vocab = tuple(vocab)
    rng = np.random.default_rng(seed)
    rows: list[np.ndarray] = []
    for word in vocab:
        for _ in range(max_tries):
            v = rng.standard_normal(filler_dim)
            v /= np.linalg.norm(v)
            if not rows or float(np.max(np.stack(rows) @ v)) < match_threshold:
                rows.append(v)
                break
        else:
            raise ConfigError(f"could not place filler for {word!r}: filler_dim={filler_dim} too small "
                              f"for {len(vocab)} symbols at match_threshold={match_threshold}")
    emb = np.stack(rows) if rows else np.zeros((0, filler_dim))
    return FillerTable(vocab, emb, empty_norm_threshold, match_threshold)


@dataclass(frozen=True)
class Operators:
    d0: np.ndarray
    d1: np.ndarray
    e0: np.ndarray
    e1: np.ndarray
    r_root: np.ndarray


def build_operators(basis: RoleBasis) -> Operators:
    n = basis.num_roles
    d0 = np.zeros((n, n))
    d1 = np.zeros((n, n))
    for i, x in enumerate(basis.paths):
        if len(x) < basis.max_depth:
            d0[i, basis.index("0" + x)] = 1.0
            d1[i, basis.index("1" + x)] = 1.0
    ops = Operators(d0, d1, d0.T.copy(), d1.T.copy(), basis.vector(""))
    for m in (ops.d0, ops.d1, ops.e0, ops.e1, ops.r_root):
        m.setflags(write=False)
    return ops


# ---------------------------------------------------------------------------
# encode / decode

def zero_tensor(basis: RoleBasis, fillers: FillerTable) -> np.ndarray:
    return np.zeros((fillers.filler_dim, basis.num_roles))


def encode_bindings(bindings: dict[str, str], basis: RoleBasis, fillers: FillerTable) -> np.ndarray:
    """Superpose ``filler(label) (x) r_path`` for each ``path -> label``."""
    t = zero_tensor(basis, fillers)
    for path, label in bindings.items():
        t[:, basis.index(path)] += fillers.embedding(label)
    return t


def encode_tree(tree: Tree, basis: RoleBasis, fillers: FillerTable) -> np.ndarray:
    t = zero_tensor(basis, fillers)
    for path, node in iter_nodes(tree):
        if len(path) > basis.max_depth:
            raise CapacityError(f"node at depth {len(path)} exceeds max_depth={basis.max_depth}")
        if node.label is not None:
            t[:, basis.index(path)] += fillers.embedding(node.label)
    return t


def recall_filler(t: np.ndarray, path: str, basis: RoleBasis) -> np.ndarray:
    return t[:, basis.index(path)].copy()


def decode_tree(t: np.ndarray, basis: RoleBasis, fillers: FillerTable) -> Tree:
    """Read a tree back out of a (possibly blended) tensor.

    Columns with norm below ``empty_norm_threshold`` are empty; any other
    column takes the label with the largest cosine, which must reach
    ``match_threshold``.
    """
    t = np.asarray(t)
    if t.shape != (fillers.filler_dim, basis.num_roles):
        raise DecodeError(f"tensor shape {t.shape} does not match "
                          f"({fillers.filler_dim}, {basis.num_roles})")
    norms = np.linalg.norm(t, axis=0)
    occupied = norms >= fillers.empty_norm_threshold
    safe = np.where(occupied, norms, 1.0)
    cos = (fillers.embeddings @ t) / safe
    best = np.argmax(cos, axis=0) if len(fillers.vocab) else np.zeros(basis.num_roles, int)
    n = basis.num_roles

    # subtree occupancy, computed bottom-up in heap order
    has_any = occupied.copy()
    for i in range(n - 1, 0, -1):
        if has_any[i]:
            has_any[(i - 1) // 2] = True

    def label_at(i: int) -> str | None:
        if not occupied[i]:
            return None
        j = best[i]
        if cos[j, i] < fillers.match_threshold:
            raise DecodeError(f"position {basis.paths[i] or 'root'} is occupied but matches no symbol "
                              f"(best cosine {cos[j, i]:.3f})")
        return fillers.vocab[j]

    def build(i: int) -> Tree:
        left, right = 2 * i + 1, 2 * i + 2
        kids = (left < n and has_any[left], right < n and has_any[right])
        label = label_at(i)
        if not any(kids):
            return EMPTY if label is None else Leaf(label)
        if not all(kids):
            raise DecodeError(f"position {basis.paths[i] or 'root'} has a single child")
        return Node(label, build(left), build(right))

    return build(0)


# ---------------------------------------------------------------------------
# lifted Lisp operations (role axis is the last axis)

def car(t: np.ndarray, ops: Operators) -> np.ndarray:
    return t @ ops.d0.T


def cdr(t: np.ndarray, ops: Operators) -> np.ndarray:
    return t @ ops.d1.T


def cons(t0: np.ndarray, t1: np.ndarray, root_filler: np.ndarray, ops: Operators) -> np.ndarray:
    return t0 @ ops.e0.T + t1 @ ops.e1.T + np.multiply.outer(root_filler, ops.r_root)


def cons_norm_lost(t0: np.ndarray, t1: np.ndarray, ops: Operators) -> float:
    """Squared norm dropped by ``cons`` because it was pushed below max_depth."""
    kept = np.sum((t0 @ ops.e0.T) ** 2) + np.sum((t1 @ ops.e1.T) ** 2)
    return float(np.sum(t0 ** 2) + np.sum(t1 ** 2) - kept)
