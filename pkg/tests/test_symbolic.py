import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treexpert.errors import ParseError, ProgramError
from treexpert.symbolic import (EMPTY, Car, Cdr, Cons, Leaf, Node, StepsAtLeast, depth, leaf_labels,
                                min_reversal_steps, mirror, mirror_program, parse_sexpr, program_from_json,
                                program_to_json, run_program, size, sym_car, sym_cdr, sym_cons, to_sexpr,
                                trace_program)

from conftest import random_tree

LABELS = ["a", "b", "c", "d", "R", "S"]


@st.composite
def trees(draw, max_depth=4):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    return random_tree(np.random.default_rng(seed), draw(st.integers(0, max_depth)), LABELS)


# a small noun-phrase fragment: some@00, sad@100, sheep@1100 (first character = first step)
FIG1 = parse_sexpr("((some x) ((sad (sheep y)) z))")


def test_parse_and_print_round_trip():
    for text in ["a", "(R a b)", "(a b)", "(NP some (AP sad sheep))", "(R (S c b) a)", "()"]:
        assert to_sexpr(parse_sexpr(text)) == text


@pytest.mark.parametrize("bad", ["", "(", "(a b", ")", "(a b c d)", "((a b) c d)", "(a) b", "(a)"])
def test_parse_errors(bad):
    with pytest.raises(ParseError):
        parse_sexpr(bad)


def test_sym_car_cdr_basics():
    t = parse_sexpr("(R a (S b c))")
    assert sym_car(t) == Leaf("a")
    assert sym_cdr(t) == parse_sexpr("(S b c)")
    assert sym_car(Leaf("a")) is EMPTY and sym_cdr(EMPTY) is EMPTY


def test_fig1_fragment_car_is_some_subtree():
    assert sym_car(sym_car(FIG1)) == Leaf("some")


def test_sym_cons_rules():
    assert sym_cons(Leaf("a"), Leaf("b"), "R") == parse_sexpr("(R a b)")
    assert sym_cons(EMPTY, EMPTY, "v") == Leaf("v")
    assert sym_cons(EMPTY, EMPTY, None) is EMPTY
    with pytest.raises(ProgramError):
        sym_cons(Leaf("a"), EMPTY, "R")


@settings(max_examples=100, deadline=None)
@given(trees())
def test_cons_of_car_cdr_is_identity(t):
    if isinstance(t, Node):
        assert sym_cons(sym_car(t), sym_cdr(t), t.label) == t


@settings(max_examples=100, deadline=None)
@given(trees())
def test_mirror_involution_preserves_leaves(t):
    assert mirror(mirror(t)) == t
    assert sorted(leaf_labels(mirror(t))) == sorted(leaf_labels(t))
    assert depth(mirror(t)) == depth(t) and size(mirror(t)) == size(t)


def test_mirror_examples():
    assert mirror(Leaf("x")) == Leaf("x")
    assert mirror(parse_sexpr("(R a (S b c))")) == parse_sexpr("(R (S c b) a)")


def test_run_program_example():
    t = parse_sexpr("(R a (S b (T sheep d)))")
    assert run_program([Cdr(0), Cdr(1), Car(2)], t) == Leaf("sheep")
    assert run_program([], t) == t


def test_trace_and_bad_indices():
    t = parse_sexpr("(R a b)")
    assert trace_program([Car(0), Cdr(0), Cons(2, 1, "R")], t) == [t, Leaf("a"), Leaf("b"), parse_sexpr("(R b a)")]
    with pytest.raises(ProgramError):
        run_program([Car(1)], t)
    with pytest.raises(ProgramError):
        run_program([Cons(0, 5, None)], t)


def test_program_json_round_trip():
    prog = [Car(0), Cdr(1), Cons(2, 1, "R"), Cons(0, 0, None)]
    data = program_to_json(prog)
    assert program_from_json(json.dumps(data)) == prog
    with pytest.raises(ProgramError):
        program_from_json([{"op": "jump", "arg": 0}])
    with pytest.raises(ProgramError):
        program_from_json([{"op": "car"}])


@settings(max_examples=100, deadline=None)
@given(trees(max_depth=5))
def test_mirror_program_computes_mirror(t):
    assert run_program(mirror_program(t), t) == mirror(t)


def _brute_force_min_steps(tree, max_len):
    """Breadth-first over every program up to ``max_len``: all car/cdr/cons
    choices, roots from the tree's labels or None.  Only results deeper than
    the goal are dropped (their parts are already available).  Programs are
    identified by the set of trees they have produced."""
    goal = mirror(tree)
    if goal == tree:
        return 0
    roots = sorted(set(_labels(tree))) + [None]
    limit = depth(goal)
    frontier = {frozenset([tree])}
    for length in range(1, max_len + 1):
        nxt = set()
        for avail in frontier:
            ts = list(avail)
            results = [sym_car(t) for t in ts] + [sym_cdr(t) for t in ts]
            results += [_apply(Cons(0, 1, r), [a, b]) for a in ts for b in ts for r in roots]
            for new in results:
                if new is None or depth(new) > limit:
                    continue
                if new == goal:
                    return length
                nxt.add(avail | {new})
        frontier = nxt
    return None


def _labels(t):
    if isinstance(t, Node):
        return ([t.label] if t.label is not None else []) + _labels(t.left) + _labels(t.right)
    return [t.label] if isinstance(t, Leaf) else []


def _apply(ins, ts):
    try:
        if isinstance(ins, Car):
            return sym_car(ts[ins.arg])
        if isinstance(ins, Cdr):
            return sym_cdr(ts[ins.arg])
        return sym_cons(ts[ins.arg0], ts[ins.arg1], ins.root)
    except ProgramError:
        return None


def test_min_reversal_steps_examples():
    assert min_reversal_steps(Leaf("x")) == 0
    assert min_reversal_steps(parse_sexpr("(R a b)")) == 3
    assert min_reversal_steps(parse_sexpr("(R a a)")) == 0


@pytest.mark.slow
@pytest.mark.parametrize("text", ["(R a b)", "(R a (S b c))", "((a b) c)"])
def test_min_reversal_steps_matches_brute_force(text):
    t = parse_sexpr(text)
    assert min_reversal_steps(t) == _brute_force_min_steps(t, 6)


def test_min_reversal_steps_full_depth3_within_budget():
    full = parse_sexpr("(R (S (T a b) (U c d)) (V (W e f) (X g h)))")
    assert isinstance(min_reversal_steps(full), StepsAtLeast)   # 15 nodes: beyond the search cap
    small = parse_sexpr("(R (S a b) (T c d))")
    n = min_reversal_steps(small)
    assert not isinstance(n, StepsAtLeast) and n <= 28
    assert n <= len(mirror_program(small))


def test_min_reversal_steps_budget_marker():
    t = parse_sexpr("(R (S a b) (T c d))")
    out = min_reversal_steps(t, max_len=2)
    assert isinstance(out, StepsAtLeast) and out == 3
