import numpy as np
import pytest

from treexpert import diffmath as dm
from treexpert.errors import ProgramError
from treexpert.symbolic import Car, Cdr, Cons, Leaf, Node, depth, sym_car, sym_cdr, sym_cons
from treexpert.tpr import build_filler_table, build_operators, build_role_basis

VOCAB40 = [f"s{i}" for i in range(40)]


@pytest.fixture(scope="session")
def basis6():
    return build_role_basis(6)


@pytest.fixture(scope="session")
def fillers40():
    return build_filler_table(VOCAB40, 32, seed=0)


@pytest.fixture(scope="session")
def ops6(basis6):
    return build_operators(basis6)


def random_tree(rng, max_depth, vocab, p_leaf=0.3, label_inner=True):
    """Random binary tree of depth <= max_depth with labels from ``vocab``."""
    if max_depth == 0 or rng.random() < p_leaf:
        return Leaf(vocab[rng.integers(len(vocab))])
    label = vocab[rng.integers(len(vocab))] if label_inner and rng.random() < 0.5 else None
    return Node(label, random_tree(rng, max_depth - 1, vocab, p_leaf, label_inner),
                random_tree(rng, max_depth - 1, vocab, p_leaf, label_inner))


def random_program(rng, source, max_len, max_depth, labels):
    """A valid program of length 1..max_len on ``source``: every instruction
    is drawn uniformly and redrawn when it fails or overflows ``max_depth``."""
    trees = [source]
    prog = []
    length = int(rng.integers(1, max_len + 1))
    while len(prog) < length:
        n = len(trees)
        kind = rng.integers(3)
        if kind == 0:
            ins, out = Car(int(rng.integers(n))), None
        elif kind == 1:
            ins, out = Cdr(int(rng.integers(n))), None
        else:
            root = labels[rng.integers(len(labels))] if rng.random() < 0.8 else None
            ins = Cons(int(rng.integers(n)), int(rng.integers(n)), root)
        try:
            if isinstance(ins, Car):
                out = sym_car(trees[ins.arg])
            elif isinstance(ins, Cdr):
                out = sym_cdr(trees[ins.arg])
            else:
                out = sym_cons(trees[ins.arg0], trees[ins.arg1], ins.root)
        except ProgramError:
            continue
        if depth(out) > max_depth:
            continue
        trees.append(out)
        prog.append(ins)
    return prog


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(1, max |b|)  -- relative to the gradient scale."""
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)), np.max(np.abs(a))))


def check_grads(build, params, eps=1e-6, max_entries=None, rng=None):
    """Compare tape gradients of scalar ``build()`` with finite differences for
    every tensor in ``params``.  Returns the worst relative error."""
    for p in params:
        p.grad = None
    with dm.Tape() as tape:
        loss = build()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)

        def f():
            return float(build().data)

        if max_entries is not None and p.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = p.data.reshape(-1)
            idx = rng.choice(flat.size, max_entries, replace=False)
            num = np.empty(max_entries)
            for j, k in enumerate(idx):
                old = flat[k]
                flat[k] = old + eps
                fp = f()
                flat[k] = old - eps
                fm = f()
                flat[k] = old
                num[j] = (fp - fm) / (2 * eps)
            worst = max(worst, rel_err(analytic.reshape(-1)[idx], num))
        else:
            worst = max(worst, rel_err(analytic, numeric_grad(f, p.data, eps)))
    return worst


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

ACCEPTANCE: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
