import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treexpert.errors import ConfigError, GenerationError, ParseError
from treexpert.symbolic import Leaf, depth, mirror, parse_sexpr, run_program, to_sexpr
from treexpert.tasks import (ACTIVE_TO_LOGICAL, HELDOUT_ADJECTIVES, SPLITS, TASK_KINDS, SamplePair, TaskSpec,
                             all_op_words, ap_lengths, by_split, car_cdr_pair, generate, gen_grammar_pair,
                             make_dataset, op_path, op_word, read_dataset, task_vocab, vocab_hash,
                             write_dataset)

SMALL = {"train": 200, "test_id": 50, "test_ood_lexical": 50, "test_ood_structural": 50}


def spec(kind, **kw):
    return TaskSpec(task_kind=kind, sizes=dict(SMALL), **kw)


@pytest.fixture(scope="module", params=TASK_KINDS)
def dataset(request):
    s = spec(request.param, seed=7)
    return s, generate(s)


# ---------------------------------------------------------------------------
# examples

def test_op_words():
    assert op_word("1") == "cdr" and op_word("0") == "car"
    assert op_word("10") == "cadr"          # cdr first, then car
    assert op_path("caddr") == "110"
    assert len(all_op_words()) == 2 + 4 + 8 + 16
    assert all(op_path(op_word(op_path(w))) == op_path(w) for w in all_op_words())
    with pytest.raises(GenerationError):
        op_word("00000")
    with pytest.raises(GenerationError):
        op_path("cxr")


def test_car_cdr_examples():
    p = car_cdr_pair(parse_sexpr("(R a b)"), "1", "train")
    assert p.target == Leaf("b") and p.meta["op_word"] == "cdr" and p.meta["payload_root"] == "R"
    assert to_sexpr(p.source) == "(cdr a b)"
    p = car_cdr_pair(parse_sexpr("(R a (S b c))"), "10", "train")
    assert p.meta["op_word"] == "cadr" and p.target == Leaf("b")
    with pytest.raises(GenerationError):
        car_cdr_pair(parse_sexpr("(R a b)"), "11", "train")


def test_active_to_logical_example():
    src = parse_sexpr("(S (NP some (AP sad sheep)) (VP see (NP a wolf)))")
    assert to_sexpr(run_program(ACTIVE_TO_LOGICAL, src)) == "(see (args (NP some (AP sad sheep)) (NP a wolf)))"


def test_reverse_example():
    assert mirror(parse_sexpr("(R a (S b c))")) == parse_sexpr("(R (S c b) a)")


def test_lexical_ood_uses_funny():
    assert "funny" in HELDOUT_ADJECTIVES
    s = spec("active_logical", seed=0)
    words = {w for p in generate(s) if p.split == "test_ood_lexical" for w in to_sexpr(p.source).replace("(", " ").replace(")", " ").split()}
    assert "funny" in words


# ---------------------------------------------------------------------------
# invariants over full datasets

def test_targets_match_oracle(dataset):
    s, pairs = dataset
    for p in pairs:
        assert run_program(p.program, p.source) == p.target
        if s.task_kind == "reverse":
            assert p.target == mirror(p.source)


def test_split_sizes(dataset):
    _, pairs = dataset
    assert {k: len(v) for k, v in by_split(pairs).items()} == SMALL


def test_split_hygiene(dataset):
    s, pairs = dataset
    splits = by_split(pairs)
    held = set(s.heldout_adjectives)
    train_max = max(max(ap_lengths(p.source)) for p in splits["train"] + splits["test_id"])
    for split in ("train", "test_id", "test_ood_structural"):
        for p in splits[split]:
            assert not held & set(to_sexpr(p.source).replace("(", " ").replace(")", " ").split())
    for p in splits["test_ood_lexical"]:
        words = set(to_sexpr(p.source).replace("(", " ").replace(")", " ").split())
        assert words & held and not words & set(s.train_adjectives)
    for p in splits["test_ood_structural"]:
        assert min(ap_lengths(p.source)) > train_max
    train_sources = {p.source for p in splits["train"]}
    assert not any(p.source in train_sources for p in splits["test_id"])


def test_depth_fits(dataset):
    s, pairs = dataset
    assert all(depth(p.source) <= s.depth and depth(p.target) <= s.depth for p in pairs)


def test_required_depths():
    assert spec("car_cdr_seq").depth == 6 and spec("reverse").depth == 6
    assert spec("passive_logical").depth == 8
    with pytest.raises(ConfigError):
        spec("car_cdr_seq", max_depth=5)


def test_car_cdr_op_lengths():
    pairs = generate(spec("car_cdr_seq", op_lengths=(3, 3)))
    assert all(len(p.program) == 3 for p in pairs)


def test_grammar_directions():
    pairs = generate(spec("active_and_passive_logical"))
    assert {p.meta["direction"] for p in pairs} == {"active->logical", "passive->logical"}
    pinned = gen_grammar_pair(spec("active_logical"), "logical->active")
    assert {p.meta["direction"] for p in pinned} == {"logical->active"}
    with pytest.raises(ConfigError):
        gen_grammar_pair(spec("active_logical"), "sideways")


@pytest.mark.parametrize("kw", [{"task_kind": "nope"}, {"ood_ap_length": 2}, {"op_lengths": (0, 2)},
                                {"op_lengths": (1, 5)}, {"heldout_adjectives": ("sad",)},
                                {"sizes": {"dev": 3}}, {"nouns": ()}])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        TaskSpec(**kw)


def test_lexical_ood_needs_adjective_slot():
    with pytest.raises(GenerationError):
        generate(TaskSpec(task_kind="reverse", id_ap_lengths=(0, 0), ood_ap_length=1,
                          sizes={"test_ood_lexical": 5}))


# ---------------------------------------------------------------------------
# determinism and I/O

def test_determinism_byte_identical(tmp_path):
    a = make_dataset(spec("reverse", seed=3), tmp_path / "a")
    b = make_dataset(spec("reverse", seed=3), tmp_path / "b")
    assert a == b
    for split in SPLITS:
        assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == (tmp_path / "b" / f"{split}.jsonl").read_bytes()
    c = make_dataset(spec("reverse", seed=4), tmp_path / "c")
    assert (tmp_path / "c" / "train.jsonl").read_bytes() != (tmp_path / "a" / "train.jsonl").read_bytes()
    assert a["vocab_hash"] == c["vocab_hash"] == vocab_hash(task_vocab(spec("reverse")))


def test_vocab_hash_order_independent():
    assert vocab_hash(["b", "a"]) == vocab_hash(["a", "b"]) != vocab_hash(["a", "c"])


def test_round_trip(tmp_path, dataset):
    _, pairs = dataset
    path = tmp_path / "d.jsonl"
    write_dataset(pairs, path)
    assert read_dataset(path) == pairs


def test_read_empty_and_truncated(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert read_dataset(empty) == []
    good = json.dumps(SamplePair(Leaf("a"), Leaf("a"), "train").to_json())
    bad = tmp_path / "b.jsonl"
    bad.write_text(good + "\n" + good + "\n" + good[:20] + "\n")
    with pytest.raises(ParseError) as info:
        read_dataset(bad)
    assert info.value.line == 3
    bad.write_text(good + "\n" + good.replace('"a"', '"(a"', 1) + "\n")
    with pytest.raises(ParseError) as info:
        read_dataset(bad)
    assert info.value.line == 2


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(TASK_KINDS))
def test_any_seed_generates_valid_data(seed, kind):
    s = TaskSpec(task_kind=kind, seed=seed, sizes={k: 10 for k in SPLITS})
    for p in generate(s):
        assert run_program(p.program, p.source) == p.target
