"""Synthetic (source, target) tree tasks with ID and OOD splits.

Sentences come from a small grammar.  Noun phrases are ``(NP det nominal)``
where a nominal is a noun or ``(AP adj nominal)``, so each adjective adds one
level of depth:

    active   (S NP_agent (VP verb NP_patient))
    passive  (S NP_patient (VP aux (VP verb (PP by NP_agent))))
    logical  (verb (args NP_agent NP_patient))

Every target is produced by running a car/cdr/cons program on the source, and
the program is stored with the sample.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, GenerationError, ParseError
from .symbolic import (EMPTY, Car, Cdr, Cons, Instruction, Leaf, Node, Tree, depth, iter_nodes, labels,
                       mirror, mirror_program, parse_sexpr, program_from_json, program_to_json,
                       run_program, to_sexpr)

TASK_KINDS = ("car_cdr_seq", "active_logical", "passive_logical", "active_and_passive_logical", "reverse")
SPLITS = ("train", "test_id", "test_ood_lexical", "test_ood_structural")

NOUNS = ("sheep", "wolf", "dog", "cat", "bird", "horse", "fox", "mouse", "goat", "bear", "lion", "frog")
VERBS = ("see", "chase", "love", "help", "follow", "hear", "find", "meet")
DETERMINERS = ("a", "the", "some", "every")
ADJECTIVES = ("sad", "happy", "big", "small", "old", "young", "red", "blue", "green", "tall",
              "short", "quick", "slow", "loud", "quiet", "brave", "calm", "shy", "proud", "wise")
HELDOUT_ADJECTIVES = ("funny", "angry", "lazy", "kind", "bold", "tiny", "clever", "gentle")
AUX = "is"
BY = "by"
STRUCTURE_LABELS = ("S", "VP", "NP", "AP", "PP", "args")
MAX_OP_LENGTH = 4


@dataclass
class TaskSpec:
    task_kind: str = "car_cdr_seq"
    nouns: tuple[str, ...] = NOUNS
    verbs: tuple[str, ...] = VERBS
    determiners: tuple[str, ...] = DETERMINERS
    train_adjectives: tuple[str, ...] = ADJECTIVES
    heldout_adjectives: tuple[str, ...] = HELDOUT_ADJECTIVES
    id_ap_lengths: tuple[int, int] = (0, 2)   # inclusive range per noun phrase
    ood_ap_length: int = 3
    sizes: dict = field(default_factory=lambda: {"train": 2000, "test_id": 500,
                                                 "test_ood_lexical": 500, "test_ood_structural": 500})
    seed: int = 0
    max_depth: int | None = None   # None: the smallest depth that fits the task
    op_lengths: tuple[int, int] = (1, MAX_OP_LENGTH)   # car_cdr_seq op-word lengths, inclusive

    def __post_init__(self):
        self.nouns, self.verbs = tuple(self.nouns), tuple(self.verbs)
        self.determiners = tuple(self.determiners)
        self.train_adjectives = tuple(self.train_adjectives)
        self.heldout_adjectives = tuple(self.heldout_adjectives)
        self.id_ap_lengths = tuple(self.id_ap_lengths)
        self.op_lengths = tuple(self.op_lengths)
        self.validate()

    def validate(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task_kind {self.task_kind!r}; expected one of {TASK_KINDS}")
        lo, hi = self.id_ap_lengths
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad id_ap_lengths {self.id_ap_lengths}")
        if self.ood_ap_length <= hi:
            raise ConfigError("ood_ap_length must exceed every ID adjective-chain length")
        if set(self.train_adjectives) & set(self.heldout_adjectives):
            raise ConfigError("train and held-out adjectives overlap")
        for name in ("nouns", "verbs", "determiners", "train_adjectives", "heldout_adjectives"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        lo, hi = self.op_lengths
        if not 1 <= lo <= hi <= MAX_OP_LENGTH:
            raise ConfigError(f"op_lengths must lie within 1..{MAX_OP_LENGTH}, got {self.op_lengths}")
        unknown = set(self.sizes) - set(SPLITS)
        if unknown:
            raise ConfigError(f"unknown split names {sorted(unknown)}")
        if any(int(v) < 0 for v in self.sizes.values()):
            raise ConfigError("split sizes must be non-negative")
        if self.max_depth is not None and self.max_depth < self.required_depth():
            raise ConfigError(f"max_depth={self.max_depth} is below the {self.required_depth()} "
                              f"this task needs")

    def required_depth(self) -> int:
        np_depth = self.ood_ap_length + 1
        return np_depth + (4 if self.task_kind in ("passive_logical", "active_and_passive_logical") else 2)

    @property
    def depth(self) -> int:
        return self.max_depth if self.max_depth is not None else self.required_depth()


@dataclass
class SamplePair:
    source: Tree
    target: Tree
    split: str
    meta: dict = field(default_factory=dict)

    @property
    def program(self) -> list[Instruction]:
        return program_from_json(self.meta["program"])

    def to_json(self) -> dict:
        return {"source": to_sexpr(self.source), "target": to_sexpr(self.target),
                "split": self.split, "meta": self.meta}


def task_vocab(spec: TaskSpec) -> list[str]:
    """Every symbol any split of ``spec`` may contain, sorted."""
    words = set(spec.nouns) | set(spec.verbs) | set(spec.determiners)
    words |= set(spec.train_adjectives) | set(spec.heldout_adjectives)
    words |= set(STRUCTURE_LABELS) | {AUX, BY}
    if spec.task_kind == "car_cdr_seq":
        words |= set(all_op_words())
    return sorted(words)


def vocab_hash(words: Iterable[str]) -> str:
    return hashlib.sha256(json.dumps(sorted(words)).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# grammar

def _pick(rng: np.random.Generator, items):
    return items[int(rng.integers(len(items)))]


def noun_phrase(rng: np.random.Generator, spec: TaskSpec, n_adj: int, adjectives) -> Tree:
    nominal: Tree = Leaf(_pick(rng, spec.nouns))
    for _ in range(n_adj):
        nominal = Node("AP", Leaf(_pick(rng, adjectives)), nominal)
    return Node("NP", Leaf(_pick(rng, spec.determiners)), nominal)


def active(agent: Tree, verb: str, patient: Tree) -> Tree:
    return Node("S", agent, Node("VP", Leaf(verb), patient))


def passive(agent: Tree, verb: str, patient: Tree) -> Tree:
    return Node("S", patient, Node("VP", Leaf(AUX), Node("VP", Leaf(verb), Node("PP", Leaf(BY), agent))))


def logical(agent: Tree, verb: str, patient: Tree) -> Tree:
    return Node(None, Leaf(verb), Node("args", agent, patient))


def _ap_lengths(rng: np.random.Generator, spec: TaskSpec, split: str) -> tuple[int, int]:
    if split == "test_ood_structural":
        return spec.ood_ap_length, spec.ood_ap_length
    lo, hi = spec.id_ap_lengths
    if split == "test_ood_lexical":
        lo = max(lo, 1)   # at least one adjective to carry the unseen word
    return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))


def sample_parts(rng: np.random.Generator, spec: TaskSpec, split: str) -> tuple[Tree, str, Tree]:
    """(agent NP, verb, patient NP) for ``split``."""
    adjectives = spec.heldout_adjectives if split == "test_ood_lexical" else spec.train_adjectives
    if split == "test_ood_lexical" and spec.id_ap_lengths[1] < 1:
        raise GenerationError("lexical OOD needs id_ap_lengths allowing at least one adjective")
    na, npat = _ap_lengths(rng, spec, split)
    agent = noun_phrase(rng, spec, na, adjectives)
    patient = noun_phrase(rng, spec, npat, adjectives)
    return agent, _pick(rng, spec.verbs), patient


# The fixed rewrites, as programs.  Index 0 is the source.
ACTIVE_TO_LOGICAL = [Car(0), Cdr(0), Car(2), Cdr(2), Cons(1, 4, "args"), Cons(3, 5, None)]
PASSIVE_TO_LOGICAL = [Car(0), Cdr(0), Cdr(2), Car(3), Cdr(3), Cdr(5), Cons(6, 1, "args"), Cons(4, 7, None)]
LOGICAL_TO_ACTIVE = [Car(0), Cdr(0), Car(2), Cdr(2), Cons(1, 4, "VP"), Cons(3, 5, "S")]
LOGICAL_TO_PASSIVE = [Car(0), Cdr(0), Car(2), Cdr(2), Car(1), Cons(5, 5, BY), Cons(6, 3, "PP"),
                      Cons(1, 7, "VP"), Cons(5, 5, AUX), Cons(9, 8, "VP"), Cons(4, 10, "S")]

DIRECTIONS = {
    "active->logical": (active, logical, ACTIVE_TO_LOGICAL),
    "passive->logical": (passive, logical, PASSIVE_TO_LOGICAL),
    "logical->active": (logical, active, LOGICAL_TO_ACTIVE),
    "logical->passive": (logical, passive, LOGICAL_TO_PASSIVE),
}
TASK_DIRECTIONS = {
    "active_logical": ("active->logical", "logical->active"),
    "passive_logical": ("passive->logical", "logical->passive"),
    "active_and_passive_logical": ("active->logical", "passive->logical"),
}


# ---------------------------------------------------------------------------
# car_cdr_seq

def op_word(path: str) -> str:
    """Lisp name of the car/cdr chain reaching ``path`` (first step first):
    path "10" (cdr, then car) is ``cadr``."""
    if not 1 <= len(path) <= MAX_OP_LENGTH:
        raise GenerationError(f"op path length must be 1..{MAX_OP_LENGTH}, got {len(path)}")
    return "c" + "".join("a" if c == "0" else "d" for c in reversed(path)) + "r"


def op_path(word: str) -> str:
    body = word[1:-1]
    if not (word.startswith("c") and word.endswith("r") and body and set(body) <= {"a", "d"}):
        raise GenerationError(f"not a car/cdr word: {word!r}")
    return "".join("0" if c == "a" else "1" for c in reversed(body))


def all_op_words(max_len: int = MAX_OP_LENGTH) -> list[str]:
    out = []
    for n in range(1, max_len + 1):
        for i in range(2 ** n):
            out.append(op_word(format(i, f"0{n}b")))
    return out


def path_program(path: str) -> list[Instruction]:
    return [Car(i) if c == "0" else Cdr(i) for i, c in enumerate(path)]


def car_cdr_pair(payload: Tree, path: str, split: str) -> SamplePair:
    if not isinstance(payload, Node):
        raise GenerationError("car_cdr_seq payload must be an inner node")
    word = op_word(path)
    source = Node(word, payload.left, payload.right)
    program = path_program(path)
    target = run_program(program, source)
    if target is EMPTY:
        raise GenerationError(f"op word {word} runs past a leaf")
    return SamplePair(source, target, split, {"op_word": word, "payload_root": payload.label,
                                              "program": program_to_json(program)})


def _gen_car_cdr(rng: np.random.Generator, spec: TaskSpec, split: str) -> SamplePair:
    payload = active(*sample_parts(rng, spec, split))
    lo, hi = spec.op_lengths
    paths = [p for p, _ in iter_nodes(payload) if lo <= len(p) <= hi]
    if not paths:
        raise GenerationError("payload too shallow for any op word")
    return car_cdr_pair(payload, _pick(rng, paths), split)


def _gen_grammar(rng: np.random.Generator, spec: TaskSpec, split: str, direction: str | None = None) -> SamplePair:
    if direction is None:
        direction = _pick(rng, TASK_DIRECTIONS[spec.task_kind])
    make_src, make_tgt, program = DIRECTIONS[direction]
    parts = sample_parts(rng, spec, split)
    source = make_src(*parts)
    target = run_program(program, source)
    if target != make_tgt(*parts):
        raise GenerationError(f"{direction} rewrite disagrees with the grammar")
    return SamplePair(source, target, split, {"direction": direction, "program": program_to_json(program)})


def _gen_reverse(rng: np.random.Generator, spec: TaskSpec, split: str) -> SamplePair:
    source = active(*sample_parts(rng, spec, split))
    program = mirror_program(source)
    target = run_program(program, source)
    if target != mirror(source):
        raise GenerationError("mirror program disagrees with mirror")
    return SamplePair(source, target, split, {"program": program_to_json(program)})


_GENERATORS = {"car_cdr_seq": _gen_car_cdr, "reverse": _gen_reverse,
               "active_logical": _gen_grammar, "passive_logical": _gen_grammar,
               "active_and_passive_logical": _gen_grammar}


def gen_car_cdr_seq(spec: TaskSpec) -> list[SamplePair]:
    return _generate(spec, "car_cdr_seq")


def gen_grammar_pair(spec: TaskSpec, direction: str | None = None) -> list[SamplePair]:
    """Grammar task samples.  ``direction`` pins one rewrite (e.g.
    ``"active->logical"``); by default each sample picks one of the task's
    directions."""
    if direction is not None and direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {direction!r}; expected one of {sorted(DIRECTIONS)}")
    kind = spec.task_kind if spec.task_kind in TASK_DIRECTIONS else "active_logical"
    return _generate(spec, kind, direction)


def gen_reverse(spec: TaskSpec) -> list[SamplePair]:
    return _generate(spec, "reverse")


def generate(spec: TaskSpec) -> list[SamplePair]:
    if spec.task_kind == "car_cdr_seq":
        return gen_car_cdr_seq(spec)
    if spec.task_kind == "reverse":
        return gen_reverse(spec)
    return gen_grammar_pair(spec)


def split_rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), SPLITS.index(split)])


def _generate(spec: TaskSpec, kind: str, direction: str | None = None) -> list[SamplePair]:
    gen = _GENERATORS[kind]
    extra = (direction,) if kind in TASK_DIRECTIONS else ()
    if kind in TASK_DIRECTIONS and spec.task_kind != kind:
        spec = TaskSpec(**{**asdict(spec), "task_kind": kind})
    out: list[SamplePair] = []
    train_sources: set[Tree] = set()
    for split in SPLITS:
        n = int(spec.sizes.get(split, 0))
        rng = split_rng(spec.seed, split)
        pairs: list[SamplePair] = []
        attempts = 0
        while len(pairs) < n:
            attempts += 1
            if attempts > 50 * n + 1000:
                raise GenerationError(f"could not draw {n} distinct-from-train samples for {split}")
            pair = gen(rng, spec, split, *extra)
            if split == "train":
                train_sources.add(pair.source)
            elif split == "test_id" and pair.source in train_sources:
                continue   # held-out ID test: unseen sources from the training distribution
            check_pair(pair, spec)
            pairs.append(pair)
        out.extend(pairs)
    return out


def check_pair(pair: SamplePair, spec: TaskSpec) -> None:
    """Oracle and split-hygiene checks for one sample."""
    if run_program(pair.program, pair.source) != pair.target:
        raise GenerationError("stored program does not reproduce the target")
    for tree in (pair.source, pair.target):
        if depth(tree) > spec.depth:
            raise GenerationError(f"tree depth {depth(tree)} exceeds max_depth {spec.depth}")
    words = set(labels(pair.source))
    held = words & set(spec.heldout_adjectives)
    if pair.split == "test_ood_lexical":
        if not held or words & set(spec.train_adjectives):
            raise GenerationError("lexical OOD sample must use held-out adjectives only")
    elif held:
        raise GenerationError(f"held-out adjectives {sorted(held)} leaked into {pair.split}")
    lengths = ap_lengths(pair.source)
    if pair.split == "test_ood_structural":
        if min(lengths) <= spec.id_ap_lengths[1]:
            raise GenerationError("structural OOD sample has an ID-length adjective chain")
    elif lengths and max(lengths) > spec.id_ap_lengths[1]:
        raise GenerationError("ID sample exceeds the ID adjective-chain length")


def ap_lengths(tree: Tree) -> list[int]:
    """Adjective-chain length of every noun phrase in ``tree``."""
    out = []
    for _, node in iter_nodes(tree):
        if isinstance(node, Node) and node.label == "NP":
            n, nominal = 0, node.right
            while isinstance(nominal, Node) and nominal.label == "AP":
                n, nominal = n + 1, nominal.right
            out.append(n)
    return out


def by_split(pairs: Iterable[SamplePair]) -> dict[str, list[SamplePair]]:
    out: dict[str, list[SamplePair]] = {s: [] for s in SPLITS}
    for p in pairs:
        out.setdefault(p.split, []).append(p)
    return out


# ---------------------------------------------------------------------------
# JSONL

def dumps_pair(pair: SamplePair) -> str:
    return json.dumps(pair.to_json(), sort_keys=True, separators=(",", ":"))


def write_dataset(pairs: Iterable[SamplePair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            fh.write(dumps_pair(pair) + "\n")


def read_dataset(path) -> list[SamplePair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pair = SamplePair(parse_sexpr(obj["source"]), parse_sexpr(obj["target"]),
                                  str(obj["split"]), dict(obj.get("meta", {})))
            except ParseError as exc:
                raise ParseError(str(exc), line=lineno) from exc
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed record: {exc}", line=lineno) from exc
            out.append(pair)
    return out


def write_splits(pairs: Iterable[SamplePair], out_dir) -> dict[str, int]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split, items in by_split(pairs).items():
        write_dataset(items, out_dir / f"{split}.jsonl")
        counts[split] = len(items)
    return counts


def manifest(spec: TaskSpec, counts: dict[str, int]) -> dict:
    vocab = task_vocab(spec)
    params = asdict(spec)
    params.pop("sizes")
    return {"task_kind": spec.task_kind, "seed": spec.seed, "counts": counts, "max_depth": spec.depth,
            "vocab": vocab, "vocab_hash": vocab_hash(vocab), "params": params}


def make_dataset(spec: TaskSpec, out_dir) -> dict:
    """Generate every split into ``out_dir`` plus ``manifest.json``."""
    counts = write_splits(generate(spec), out_dir)
    info = manifest(spec, counts)
    (Path(out_dir) / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info
