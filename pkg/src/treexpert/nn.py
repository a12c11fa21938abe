"""Transformer encoder layer, sinusoidal step encoding and linear heads.

Parameters are kept *stacked*: every tensor has a leading axis of size S so
that S independent layers (the experts, or one layer per DTM step) run as a
handful of batched matmuls.  A single layer is simply S = 1.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import ConfigError, ShapeError


def _normal(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / (fan_in + fan_out))


class Stacked:
    """An ordered bag of stacked parameter tensors."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors
        sizes = {t.shape[0] for t in tensors.values()}
        if len(sizes) != 1:
            raise ShapeError(f"inconsistent stack sizes {sizes}")
        self.stack = sizes.pop()

    def __getattr__(self, key):
        try:
            return self.__dict__["tensors"][key]
        except KeyError:
            raise AttributeError(key) from None

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def select(self, index) -> "Stacked":
        """Differentiable view of a subset of the stack (``index`` is an int
        array or slice)."""
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        Stacked.__init__(new, {k: dm.slice_(t, index) for k, t in self.tensors.items()})
        return new

    def named_arrays(self, prefix: str, indexed: bool) -> Iterator[tuple[str, Tensor, int | None]]:
        """``(name, tensor, stack_index)`` for checkpointing.  Indexed stacks
        are split per member (``prefix.{i}.field``); unindexed ones must have
        S = 1 and drop the stack axis."""
        for key, t in self.tensors.items():
            if indexed:
                for i in range(self.stack):
                    yield f"{prefix}.{i}.{key}", t, i
            else:
                yield f"{prefix}.{key}", t, 0


class EncoderLayerParams(Stacked):
    def __init__(self, tensors: dict[str, Tensor], d_model: int, n_heads: int):
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        super().__init__(tensors)

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int = 4, stack: int = 1,
             ffn_mult: int = 4) -> "EncoderLayerParams":
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        d, f = d_model, ffn_mult * d_model
        p = dm.parameter
        tensors = {
            "wqkv": p(_normal(rng, (stack, d, 3 * d), d, d)),
            "bqkv": p(np.zeros((stack, 1, 3 * d))),
            "wo": p(_normal(rng, (stack, d, d), d, d)),
            "bo": p(np.zeros((stack, 1, d))),
            "ln1_g": p(np.ones((stack, 1, d))),
            "ln1_b": p(np.zeros((stack, 1, d))),
            "w1": p(_normal(rng, (stack, d, f), d, f)),
            "b1": p(np.zeros((stack, 1, f))),
            "w2": p(_normal(rng, (stack, f, d), f, d)),
            "b2": p(np.zeros((stack, 1, d))),
            "ln2_g": p(np.ones((stack, 1, d))),
            "ln2_b": p(np.zeros((stack, 1, d))),
        }
        return cls(tensors, d_model, n_heads)


def encoder_layer(params: EncoderLayerParams, x: Tensor) -> Tensor:
    """Post-norm encoder layer over ``x`` of shape (S or 1, B, n, d).

    Multi-head self-attention without any mask, residual, layer norm, then a
    GELU feed-forward block, residual, layer norm.  Returns (S, B, n, d).
    """
    if x.ndim != 4 or x.shape[-1] != params.d_model:
        raise ShapeError(f"encoder_layer: expected (S, B, n, {params.d_model}), got {x.shape}")
    sx, b, n, d = x.shape
    s = params.stack
    if sx not in (1, s):
        raise ShapeError(f"encoder_layer: input stack {sx} vs parameter stack {s}")
    h, dh = params.n_heads, d // params.n_heads

    xs = dm.reshape(x, (sx, b * n, d))
    qkv = dm.add(dm.matmul(xs, params.wqkv), params.bqkv)
    qkv = dm.transpose(dm.reshape(qkv, (s, b, n, 3, h, dh)), (3, 0, 1, 4, 2, 5))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = dm.scale(dm.matmul(q, dm.swap_last(k)), 1.0 / math.sqrt(dh))
    ctx = dm.matmul(dm.softmax(scores, axis=-1), v)
    ctx = dm.reshape(dm.transpose(ctx, (0, 1, 3, 2, 4)), (s, b * n, d))
    attn = dm.add(dm.matmul(ctx, params.wo), params.bo)
    hid = dm.layer_norm(dm.add(xs, attn), params.ln1_g, params.ln1_b)
    ff = dm.add(dm.matmul(dm.gelu(dm.add(dm.matmul(hid, params.w1), params.b1)), params.w2), params.b2)
    out = dm.layer_norm(dm.add(hid, ff), params.ln2_g, params.ln2_b)
    return dm.reshape(out, (s, b, n, d))


def encoder_layer_forward(params: EncoderLayerParams, tokens) -> Tensor:
    """Single-layer, single-sequence convenience: (n, d) -> (n, d)."""
    tokens = dm.as_tensor(tokens)
    if params.stack != 1:
        raise ShapeError("encoder_layer_forward expects an unstacked (S = 1) layer")
    n, d = tokens.shape
    out = encoder_layer(params, dm.reshape(tokens, (1, 1, n, d)))
    return dm.reshape(out, (n, d))


class LinearStack(Stacked):
    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, stack: int = 1,
             std: float | None = None) -> "LinearStack":
        w = _normal(rng, (stack, d_in, d_out), d_in, d_out) if std is None \
            else rng.standard_normal((stack, d_in, d_out)) * std
        return cls({"w": dm.parameter(w), "b": dm.parameter(np.zeros((stack, 1, d_out)))})


def linear(params: LinearStack, x: Tensor) -> Tensor:
    """(S or 1, M, d_in) -> (S, M, d_out)."""
    return dm.add(dm.matmul(x, params.w), params.b)


def sinusoid(step: int, dim: int) -> np.ndarray:
    """Sin/cos encoding: entry 2i is sin(step / 10000^(2i/dim)), 2i+1 the cos."""
    if dim <= 0 or dim % 2:
        raise ConfigError(f"sinusoid dimension must be positive and even, got {dim}")
    freqs = np.power(10000.0, -np.arange(0, dim, 2) / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(step * freqs)
    out[1::2] = np.cos(step * freqs)
    return out
