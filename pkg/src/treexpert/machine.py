"""The differentiable interpreter loop.

Each step blends four argument trees out of all trees produced so far, applies
car, cdr and cons to them, and writes the op-weighted sum as the next tree:

    T(t+1) = w_car car(A_car) + w_cdr cdr(A_cdr) + w_cons cons(A_0, A_1, s)

Trees are batched tensors of shape (B, d_f, R).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .controller import StepDecision
from .diffmath import Tensor
from .errors import ConfigError, ShapeError
from .symbolic import Tree
from .tpr import FillerTable, Operators, RoleBasis, encode_tree

# op weights (car, cdr, cons) -> coefficients of the four shifted arguments
_OP_TO_SLOT = np.array([[1.0, 0.0, 0.0, 0.0],
                        [0.0, 1.0, 0.0, 0.0],
                        [0.0, 0.0, 1.0, 1.0]])


class MachineOps:
    """Role-axis operators as constant tensors: argument slot k is multiplied
    on the right by ``shifts[k]`` (D0^T, D1^T, E0^T, E1^T)."""

    def __init__(self, ops: Operators):
        self.ops = ops
        self.shifts = Tensor(np.stack([ops.d0.T, ops.d1.T, ops.e0.T, ops.e1.T]))
        self.r_root = Tensor(ops.r_root[None, None, :])
        self.num_roles = ops.r_root.shape[0]


@dataclass
class MachineState:
    trees: list[Tensor]
    stacked: Tensor                 # (B, n, d_f * R), same trees flattened
    step: int = 0
    norm_lost: np.ndarray | None = None
    cache: dict = field(default_factory=dict)

    @classmethod
    def from_trees(cls, trees: Sequence) -> "MachineState":
        trees = [dm.as_tensor(t) for t in trees]
        if not trees:
            raise ConfigError("a machine state needs the source tree")
        b = trees[0].shape[0]
        stacked = dm.concat([dm.reshape(t, (b, 1, -1)) for t in trees], axis=1)
        return cls(trees, stacked, len(trees) - 1, np.zeros(b))

    @property
    def batch(self) -> int:
        return self.trees[0].shape[0]


def init_state(source) -> MachineState:
    """State holding only the encoded source, (B, d_f, R) or (d_f, R)."""
    source = dm.as_tensor(source)
    if source.ndim == 2:
        source = Tensor(source.data[None])
    return MachineState.from_trees([source])


def blend_argument(state: MachineState, slot_weights) -> Tensor:
    """Weighted sum of past trees.  ``slot_weights`` is (B, n) for one slot or
    (B, k, n) for k slots; the result is (B, d_f, R) or (B, k, d_f, R)."""
    w = dm.as_tensor(slot_weights)
    n = len(state.trees)
    if w.shape[-1] != n:
        raise ShapeError(f"blend_argument: {w.shape[-1]} weights for {n} trees")
    b = state.batch
    shape = state.trees[0].shape[1:]
    single = w.ndim == 2
    if single:
        w = dm.reshape(w, (b, 1, n))
    out = dm.matmul(w, state.stacked)
    k = w.shape[1]
    out = dm.reshape(out, (b, k, *shape))
    return out[:, 0] if single else out


def execute_step(state: MachineState, decision: StepDecision, ops: MachineOps) -> MachineState:
    b = state.batch
    d_f = state.trees[0].shape[1]
    args = blend_argument(state, decision.arg_weights)               # (B, 4, d_f, R)
    shifted = dm.matmul(args, ops.shifts)                             # (B, 4, d_f, R)
    coeff = dm.matmul(decision.op_weights, Tensor(_OP_TO_SLOT))       # (B, 4)
    body = dm.sum_(dm.mul(dm.reshape(coeff, (b, 4, 1, 1)), shifted), axis=1)
    w_cons = decision.op_weights[:, 2:3]                              # (B, 1)
    root = dm.mul(dm.reshape(dm.mul(decision.root_filler, w_cons), (b, d_f, 1)), ops.r_root)
    new = dm.add(body, root)

    a = args.data[:, 2:4]
    s = shifted.data[:, 2:4]
    lost = (np.sum(a * a, axis=(1, 2, 3)) - np.sum(s * s, axis=(1, 2, 3))) * w_cons.data[:, 0]

    stacked = dm.concat([state.stacked, dm.reshape(new, (b, 1, -1))], axis=1)
    return MachineState(state.trees + [new], stacked, state.step + 1, state.norm_lost + lost, state.cache)


def run_batch(sources, controller, ops: MachineOps, max_steps: int) -> MachineState:
    """Encode-free core loop: iterate decide + execute ``max_steps`` times."""
    if max_steps < 0:
        raise ConfigError(f"max_steps must be >= 0, got {max_steps}")
    state = init_state(sources)
    for step in range(max_steps):
        state = execute_step(state, controller.decide(state, step), ops)
    return state


def run(source: Tree, controller, ops: MachineOps | Operators, basis: RoleBasis, fillers: FillerTable,
        max_steps: int) -> list[np.ndarray]:
    """Run one source tree and return all ``max_steps + 1`` tree tensors."""
    if max_steps < 1:
        raise ConfigError(f"max_steps must be >= 1, got {max_steps}")
    if isinstance(ops, Operators):
        ops = MachineOps(ops)
    state = run_batch(encode_tree(source, basis, fillers)[None], controller, ops, max_steps)
    return [t.data[0] for t in state.trees]
