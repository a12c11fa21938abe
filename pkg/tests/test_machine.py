import numpy as np
import pytest

from treexpert import diffmath as dm
from treexpert.controller import MoEController, OracleController, StepDecision, pad_program
from treexpert.errors import ConfigError, ShapeError
from treexpert.machine import MachineOps, MachineState, blend_argument, execute_step, run, run_batch
from treexpert.symbolic import Cons, parse_sexpr, run_program, trace_program
from treexpert.tpr import build_filler_table, build_operators, build_role_basis, encode_tree

from conftest import VOCAB40, check_grads, random_program, random_tree


@pytest.fixture(scope="module")
def world():
    basis = build_role_basis(6)
    fillers = build_filler_table(VOCAB40, 32, seed=0)
    return basis, fillers, MachineOps(build_operators(basis))


def test_hard_decisions_reproduce_symbolic_trace(world):
    basis, fillers, ops = world
    rng = np.random.default_rng(0)
    for _ in range(200):
        source = random_tree(rng, 5, VOCAB40)
        prog = random_program(rng, source, 8, 6, VOCAB40)
        oracle = OracleController([prog], fillers, len(prog))
        got = run(source, oracle, ops, basis, fillers, len(prog))
        want = trace_program(prog, source)
        assert len(got) == len(want)
        for g, w in zip(got, want):
            assert np.array_equal(g, encode_tree(w, basis, fillers))


def test_padded_program_keeps_result(world):
    basis, fillers, ops = world
    rng = np.random.default_rng(1)
    source = random_tree(rng, 5, VOCAB40)
    prog = random_program(rng, source, 4, 6, VOCAB40)
    padded = pad_program(prog, 9)
    assert len(padded) == 9
    assert run_program(padded, source) == run_program(prog, source)
    got = run(source, OracleController([prog], fillers, 9), ops, basis, fillers, 9)
    assert np.array_equal(got[-1], encode_tree(run_program(prog, source), basis, fillers))
    with pytest.raises(ConfigError):
        pad_program(prog, len(prog) - 1)


def test_batched_oracle(world):
    basis, fillers, ops = world
    rng = np.random.default_rng(2)
    sources = [random_tree(rng, 5, VOCAB40) for _ in range(6)]
    progs = [random_program(rng, s, 5, 6, VOCAB40) for s in sources]
    enc = np.stack([encode_tree(s, basis, fillers) for s in sources])
    state = run_batch(enc, OracleController(progs, fillers, 5), ops, 5)
    for i, (s, p) in enumerate(zip(sources, progs)):
        assert np.array_equal(state.trees[-1].data[i], encode_tree(run_program(p, s), basis, fillers))


def test_blend_argument():
    rng = np.random.default_rng(3)
    trees = [rng.standard_normal((2, 3, 7)) for _ in range(3)]
    state = MachineState.from_trees(trees)
    onehot = np.zeros((2, 3))
    onehot[:, 1] = 1.0
    np.testing.assert_array_equal(blend_argument(state, onehot).data, trees[1])
    w = np.array([[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]])
    expected = np.stack([sum(w[b, i] * trees[i][b] for i in range(3)) for b in range(2)])
    np.testing.assert_allclose(blend_argument(state, w).data, expected, atol=1e-14)
    multi = blend_argument(state, np.stack([w, onehot], axis=1))
    assert multi.shape == (2, 2, 3, 7)
    with pytest.raises(ShapeError):
        blend_argument(state, np.ones((2, 4)))


def test_soft_step_is_the_weighted_sum(world):
    basis, fillers, ops = world
    rng = np.random.default_rng(4)
    t = encode_tree(random_tree(rng, 4, VOCAB40), basis, fillers)
    u = encode_tree(random_tree(rng, 4, VOCAB40), basis, fillers)
    state = MachineState.from_trees([t[None], u[None]])
    op = np.array([[0.2, 0.3, 0.5]])
    args = rng.dirichlet(np.ones(2), size=(1, 4))
    s = rng.standard_normal((1, 32))
    new = execute_step(state, StepDecision(dm.Tensor(op), dm.Tensor(args), dm.Tensor(s)), ops).trees[-1].data[0]
    a = [args[0, k, 0] * t + args[0, k, 1] * u for k in range(4)]
    o = ops.ops
    expected = 0.2 * (a[0] @ o.d0.T) + 0.3 * (a[1] @ o.d1.T) \
        + 0.5 * (a[2] @ o.e0.T + a[3] @ o.e1.T + np.outer(s[0], o.r_root))
    np.testing.assert_allclose(new, expected, atol=1e-12)


def test_norm_lost_tracks_truncation(world):
    basis, fillers, ops = world
    chain = Cons(0, 0, "s1")
    deep = random_tree(np.random.default_rng(5), 6, VOCAB40, p_leaf=0.0)
    enc = encode_tree(deep, basis, fillers)[None]
    state = run_batch(enc, OracleController([[chain]], fillers, 1), ops, 1)
    assert state.norm_lost[0] > 0
    shallow = encode_tree(random_tree(np.random.default_rng(6), 3, VOCAB40), basis, fillers)[None]
    assert run_batch(shallow, OracleController([[chain]], fillers, 1), ops, 1).norm_lost[0] == 0


def test_run_validates_steps(world):
    basis, fillers, ops = world
    with pytest.raises(ConfigError):
        run(random_tree(np.random.default_rng(0), 2, VOCAB40), None, ops, basis, fillers, 0)
    with pytest.raises(ConfigError):
        MachineState.from_trees([])


def test_gradients_through_four_steps():
    basis = build_role_basis(2)
    fillers = build_filler_table(["a", "b", "c", "R"], 4, seed=1)
    ops = MachineOps(build_operators(basis))
    rng = np.random.default_rng(7)
    ctrl = MoEController.init(rng, filler_dim=4, num_roles=basis.num_roles, d_model=8, n_experts=3,
                              top_k=2, n_heads=2)
    src = np.stack([encode_tree(parse_sexpr(x), basis, fillers) for x in ("(R a b)", "(c (a b))")])
    tgt = np.stack([encode_tree(parse_sexpr(x), basis, fillers) for x in ("(R b a)", "c")])

    def build():
        state = run_batch(src, ctrl, ops, 4)
        return dm.mse_loss(state.trees[-1], dm.Tensor(tgt))

    assert check_grads(build, ctrl.parameters(), eps=1e-5, max_entries=15, rng=rng) < 1e-4
