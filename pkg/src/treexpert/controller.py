"""Controllers map the list of trees produced so far to a ``StepDecision``.

* ``MoEController``: one router plus a pool of experts shared by every step
  (dense, or sparse top-k).
* ``DTMController``: a dedicated layer per step.
* ``OracleController``: replays known programs as one-hot decisions.

Each expert is a single encoder layer reading the tree tokens plus two
classification tokens; the op head reads the first classification token, the
root-filler head the second, and the four argument heads read every tree
token.  Expert proposals are mixed at the prediction level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import CheckpointError, ConfigError
from .nn import EncoderLayerParams, LinearStack, Stacked, encoder_layer, linear, sinusoid
from .symbolic import Car, Cdr, Cons, Instruction

N_OPS = 3
N_SLOTS = 4  # car-arg, cdr-arg, cons-arg0, cons-arg1


@dataclass
class StepDecision:
    op_weights: Tensor   # (B, 3) over car, cdr, cons
    arg_weights: Tensor  # (B, 4, n_trees)
    root_filler: Tensor  # (B, d_f)


class TreeTokenizer(Stacked):
    """Linear map from a flattened tree tensor to one token, plus the two
    learned classification tokens (op, root)."""

    @classmethod
    def init(cls, rng: np.random.Generator, filler_dim: int, num_roles: int, d_model: int) -> "TreeTokenizer":
        f = filler_dim * num_roles
        return cls({
            "w": dm.parameter(rng.standard_normal((1, f, d_model)) / np.sqrt(filler_dim)),
            "b": dm.parameter(np.zeros((1, 1, d_model))),
            "cls": dm.parameter(rng.standard_normal((1, 2, d_model)) * 0.5),
        })

    @property
    def d_model(self) -> int:
        return self.w.shape[-1]

    def tree_token(self, tree: Tensor) -> Tensor:
        """(B, d_f, R) -> (B, 1, d_model)."""
        b = tree.shape[0]
        flat = dm.reshape(tree, (1, b, -1))
        tok = dm.add(dm.matmul(flat, self.w), self.b)
        return dm.reshape(tok, (b, 1, self.d_model))

    def sequence(self, tree_tokens: Sequence[Tensor]) -> Tensor:
        b = tree_tokens[0].shape[0]
        cls = dm.mul(self.cls, np.ones((b, 1, 1)))
        cls = dm.reshape(cls, (b, 2, self.d_model))
        return dm.concat([*tree_tokens, cls], axis=1)


def tokenize(trees: Sequence, tokenizer: TreeTokenizer) -> Tensor:
    """Tokens for a list of (B, d_f, R) trees: one per tree in production
    order, then cls-op, then cls-root.  Shape (B, n + 2, d_model)."""
    trees = [dm.as_tensor(t) for t in trees]
    if not trees:
        raise ConfigError("tokenize needs at least one tree")
    return tokenizer.sequence([tokenizer.tree_token(t) for t in trees])


class ExpertHeads(Stacked):
    """Stacked expert layers with their op / root / argument heads."""

    def __init__(self, layer: EncoderLayerParams, op: LinearStack, root: LinearStack, arg: LinearStack):
        self.layer, self.op, self.root, self.arg = layer, op, root, arg
        self.stack = layer.stack
        self.tensors = {}
        for name, part in self.parts():
            for k, t in part.tensors.items():
                self.tensors[f"{name}.{k}"] = t

    def parts(self):
        return (("layer", self.layer), ("op", self.op), ("root", self.root), ("arg", self.arg))

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, filler_dim: int, stack: int,
             n_heads: int = 4) -> "ExpertHeads":
        return cls(EncoderLayerParams.init(rng, d_model, n_heads, stack),
                   LinearStack.init(rng, d_model, N_OPS, stack),
                   LinearStack.init(rng, d_model, filler_dim, stack),
                   LinearStack.init(rng, d_model, N_SLOTS, stack))

    def select(self, index) -> "ExpertHeads":
        return ExpertHeads(self.layer.select(index), self.op.select(index),
                           self.root.select(index), self.arg.select(index))


def experts_forward(tokens: Tensor, heads: ExpertHeads) -> tuple[Tensor, Tensor, Tensor]:
    """Run all S stacked experts on shared tokens (B, n + 2, d).

    Returns op weights (S, B, 3), argument weights (S, B, 4, n) and root
    fillers (S, B, d_f).
    """
    b, m, d = tokens.shape
    n = m - 2
    s = heads.stack
    h = encoder_layer(heads.layer, dm.reshape(tokens, (1, b, m, d)))
    op_w = dm.softmax(linear(heads.op, h[:, :, n, :]), axis=-1)
    root = linear(heads.root, h[:, :, n + 1, :])
    tree_h = dm.reshape(h[:, :, :n, :], (s, b * n, d))
    arg_logits = dm.reshape(linear(heads.arg, tree_h), (s, b, n, N_SLOTS))
    arg_w = dm.softmax(dm.transpose(arg_logits, (0, 1, 3, 2)), axis=-1)
    return op_w, arg_w, root


def expert_forward(trees: Sequence, tokenizer: TreeTokenizer, heads: ExpertHeads, index: int = 0) -> StepDecision:
    """Decision of a single expert ``index`` of ``heads``."""
    sub = heads.select(slice(index, index + 1))
    op_w, arg_w, root = experts_forward(tokenize(trees, tokenizer), sub)
    return StepDecision(op_w[0], arg_w[0], root[0])


class Router:
    def __init__(self, layer: EncoderLayerParams, proj: LinearStack, n_experts: int, top_k: int | None = None):
        if top_k is not None and not 1 <= top_k <= n_experts:
            raise ConfigError(f"top_k must be in [1, {n_experts}], got {top_k}")
        self.layer, self.proj = layer, proj
        self.n_experts = n_experts
        self.top_k = top_k

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_experts: int = 16, top_k: int | None = None,
             n_heads: int = 4) -> "Router":
        return cls(EncoderLayerParams.init(rng, d_model, n_heads),
                   LinearStack.init(rng, 2 * d_model, n_experts), n_experts, top_k)

    def parts(self):
        return (("layer", self.layer), ("proj", self.proj))

    def parameters(self) -> list[Tensor]:
        return self.layer.parameters() + self.proj.parameters()


def router_logits(tokens: Tensor, step: int, router: Router) -> Tensor:
    """Mean-pooled router encoding concatenated with the step encoding,
    mapped linearly to one logit per expert: (B, n_experts)."""
    b, m, d = tokens.shape
    h = encoder_layer(router.layer, dm.reshape(tokens, (1, b, m, d)))
    pooled = dm.mean(h, axis=2)  # (1, B, d)
    step_enc = Tensor(np.broadcast_to(sinusoid(step, d), (1, b, d)))
    logits = linear(router.proj, dm.concat([pooled, step_enc], axis=-1))
    return dm.reshape(logits, (b, router.n_experts))


def top_k_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest logits per row; ties go to the lower index."""
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def route(tokens: Tensor, step: int, router: Router) -> Tensor:
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    logits = router_logits(tokens, step, router)
    if router.top_k is None:
        return dm.softmax(logits, axis=-1)
    return dm.softmax(logits, axis=-1, mask=top_k_mask(logits.data, router.top_k))


def mix_decisions(weights: Tensor, op_w: Tensor, arg_w: Tensor, root: Tensor) -> StepDecision:
    """Convex combination over the leading expert axis; ``weights`` is (B, S)."""
    s = op_w.shape[0]
    b = weights.shape[0]
    w = dm.transpose(weights, (1, 0))
    op = dm.sum_(dm.mul(dm.reshape(w, (s, b, 1)), op_w), axis=0)
    args = dm.sum_(dm.mul(dm.reshape(w, (s, b, 1, 1)), arg_w), axis=0)
    rt = dm.sum_(dm.mul(dm.reshape(w, (s, b, 1)), root), axis=0)
    return StepDecision(op, args, rt)


def moe_decide(tokens: Tensor, step: int, router: Router, experts: ExpertHeads) -> StepDecision:
    weights = route(tokens, step, router)
    if router.top_k is not None and router.top_k < experts.stack:
        active = np.flatnonzero((weights.data > 0).any(axis=0))
        experts = experts.select(active)
        weights = weights[:, active]
    return mix_decisions(weights, *experts_forward(tokens, experts))


# ---------------------------------------------------------------------------
# controllers

def _cached_tokens(state, tokenizer: TreeTokenizer) -> Tensor:
    cache = state.cache.setdefault(id(tokenizer), [])
    for tree in state.trees[len(cache):]:
        cache.append(tokenizer.tree_token(tree))
    return tokenizer.sequence(cache[:len(state.trees)])


class _Learned:
    tokenizer: TreeTokenizer

    def named_parameters(self) -> Iterator[tuple[str, Tensor, int | None, bool]]:
        """``(name, stacked tensor, stack index, indexed)`` in a fixed order."""
        for name, t, i in self.tokenizer.named_arrays("tokenizer", indexed=False):
            yield name, t, i, False
        for prefix, part, indexed in self._groups():
            for name, t, i in part.named_arrays(prefix, indexed):
                yield name, t, i, indexed

    def parameters(self) -> list[Tensor]:
        seen, out = set(), []
        for _, t, _, _ in self.named_parameters():
            if id(t) not in seen:
                seen.add(id(t))
                out.append(t)
        return out

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t, i, indexed in self.named_parameters():
            out[name] = t.data[i].copy()
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        expected = {name for name, *_ in self.named_parameters()}
        missing = expected - arrays.keys()
        extra = arrays.keys() - expected
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, t, i, indexed in self.named_parameters():
            if t.data[i].shape != arrays[name].shape:
                raise CheckpointError(f"{name}: shape {arrays[name].shape}, expected {t.data[i].shape}")
            t.data[i] = arrays[name]


class MoEController(_Learned):
    kind = "moe"

    def __init__(self, tokenizer: TreeTokenizer, router: Router, experts: ExpertHeads):
        self.tokenizer, self.router, self.experts = tokenizer, router, experts

    @classmethod
    def init(cls, rng: np.random.Generator, *, filler_dim: int, num_roles: int, d_model: int = 64,
             n_experts: int = 16, top_k: int | None = None, n_heads: int = 4) -> "MoEController":
        return cls(TreeTokenizer.init(rng, filler_dim, num_roles, d_model),
                   Router.init(rng, d_model, n_experts, top_k, n_heads),
                   ExpertHeads.init(rng, d_model, filler_dim, n_experts, n_heads))

    def _groups(self):
        for name, part in self.router.parts():
            yield f"router.{name}", part, False
        for name, part in self.experts.parts():
            yield f"expert.{name}", part, True

    def named_parameters(self):
        # expert.{i}.* naming: the index sits right after "expert"
        for name, t, i, indexed in super().named_parameters():
            if name.startswith("expert."):
                _, part, idx, field = name.split(".", 3)
                name = f"expert.{idx}.{part}.{field}"
            yield name, t, i, indexed

    def decide(self, state, step: int) -> StepDecision:
        return moe_decide(_cached_tokens(state, self.tokenizer), step, self.router, self.experts)

    def route_weights(self, state, step: int) -> Tensor:
        return route(_cached_tokens(state, self.tokenizer), step, self.router)


class DTMController(_Learned):
    """Baseline with one dedicated layer (and heads) per step."""

    kind = "dtm"

    def __init__(self, tokenizer: TreeTokenizer, layers: ExpertHeads):
        self.tokenizer, self.layers = tokenizer, layers

    @classmethod
    def init(cls, rng: np.random.Generator, *, filler_dim: int, num_roles: int, max_steps: int,
             d_model: int = 64, n_heads: int = 4) -> "DTMController":
        return cls(TreeTokenizer.init(rng, filler_dim, num_roles, d_model),
                   ExpertHeads.init(rng, d_model, filler_dim, max_steps, n_heads))

    def _groups(self):
        for name, part in self.layers.parts():
            yield f"dtm.{name}", part, True

    def named_parameters(self):
        for name, t, i, indexed in super().named_parameters():
            if name.startswith("dtm."):
                _, part, idx, field = name.split(".", 3)
                name = f"dtm.layer.{idx}.{part}.{field}" if part != "layer" else f"dtm.layer.{idx}.{field}"
            yield name, t, i, indexed

    def decide(self, state, step: int) -> StepDecision:
        if not 0 <= step < self.layers.stack:
            raise ConfigError(f"DTM has {self.layers.stack} step layers, step {step} requested")
        tokens = _cached_tokens(state, self.tokenizer)
        op_w, arg_w, root = experts_forward(tokens, self.layers.select(slice(step, step + 1)))
        return StepDecision(op_w[0], arg_w[0], root[0])


def dtm_decide(trees: Sequence, step: int, controller: DTMController) -> StepDecision:
    from .machine import MachineState

    return controller.decide(MachineState.from_trees(trees), step)


class OracleController:
    """Hard one-hot decisions replaying one program per batch element.

    Programs shorter than the run are right-aligned: the leading steps apply
    ``car`` to the input (their output is never referenced), so the program's
    last instruction lands on the final step.
    """

    kind = "oracle"

    def __init__(self, programs: Sequence[Sequence[Instruction]], fillers, total_steps: int):
        self.programs = [pad_program(p, total_steps) for p in programs]
        self.fillers = fillers

    def decide(self, state, step: int) -> StepDecision:
        b, n = len(self.programs), len(state.trees)
        op = np.zeros((b, N_OPS))
        args = np.zeros((b, N_SLOTS, n))
        root = np.zeros((b, self.fillers.filler_dim))
        for i, prog in enumerate(self.programs):
            ins = prog[step]
            if isinstance(ins, Car):
                op[i, 0] = 1.0
                args[i, :, ins.arg] = 1.0
            elif isinstance(ins, Cdr):
                op[i, 1] = 1.0
                args[i, :, ins.arg] = 1.0
            else:
                op[i, 2] = 1.0
                args[i, 0:2, 0] = 1.0
                args[i, 2, ins.arg0] = 1.0
                args[i, 3, ins.arg1] = 1.0
                if ins.root is not None:
                    root[i] = self.fillers.embedding(ins.root)
        return StepDecision(Tensor(op), Tensor(args), Tensor(root))


def pad_program(program: Sequence[Instruction], total_steps: int) -> list[Instruction]:
    pad = total_steps - len(program)
    if pad < 0:
        raise ConfigError(f"program of length {len(program)} does not fit in {total_steps} steps")

    def shift(i: int) -> int:
        return i if i == 0 else i + pad

    out: list[Instruction] = [Car(0)] * pad
    for ins in program:
        if isinstance(ins, Car):
            out.append(Car(shift(ins.arg)))
        elif isinstance(ins, Cdr):
            out.append(Cdr(shift(ins.arg)))
        else:
            out.append(Cons(shift(ins.arg0), shift(ins.arg1), ins.root))
    return out
