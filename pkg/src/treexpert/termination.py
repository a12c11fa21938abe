"""Sluggish termination with a damper and an explorer step predictor.

Both predictors are a softmax over one learned scalar per step.  Labels:

* damper: follow the explorer once the explorer is confident, else stay.
* explorer: once the damper is confident and agrees with it, pick the best of
  the local candidates {i-4, i, i+5} by loss plus a per-index penalty that
  favours earlier stops; otherwise stay.

Step index ``s`` selects tree ``s`` of the machine trace (tree 0 is the
input), so predictors cover trees 0 .. max_steps - 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import ConfigError

DEFAULT_OFFSETS = (-4, 0, 5)


@dataclass
class TermPredictor:
    raw: Tensor
    scale: float = 10.0

    @classmethod
    def init(cls, max_steps: int, rng: np.random.Generator, scale: float = 10.0,
             init_std: float = 0.01) -> "TermPredictor":
        if max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {max_steps}")
        return cls(dm.parameter(rng.normal(0.0, init_std, max_steps)), scale)

    @property
    def max_steps(self) -> int:
        return self.raw.shape[0]

    def logits(self) -> Tensor:
        return dm.scale(self.raw, self.scale)

    def probs(self) -> np.ndarray:
        z = self.raw.data * self.scale
        e = np.exp(z - z.max())
        return e / e.sum()

    def argmax(self) -> int:
        return int(np.argmax(self.raw.data))  # first maximum: ties go low

    def confidence(self) -> float:
        return float(self.probs()[self.argmax()])


@dataclass
class TermState:
    damper: TermPredictor
    explorer: TermPredictor
    confidence_threshold: float = 0.8
    offsets: tuple[int, ...] = DEFAULT_OFFSETS
    discount: float = 0.9
    residual_weight: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ConfigError("confidence_threshold must lie in (0, 1)")
        if any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise ConfigError(f"offsets must be strictly increasing, got {self.offsets}")
        if self.damper.max_steps != self.explorer.max_steps:
            raise ConfigError("damper and explorer must cover the same steps")

    @classmethod
    def init(cls, max_steps: int, rng: np.random.Generator, scale: float = 10.0, **kw) -> "TermState":
        return cls(TermPredictor.init(max_steps, rng, scale), TermPredictor.init(max_steps, rng, scale), **kw)

    @property
    def max_steps(self) -> int:
        return self.damper.max_steps

    @property
    def i_damp(self) -> int:
        return self.damper.argmax()

    @property
    def i_expl(self) -> int:
        return self.explorer.argmax()

    @property
    def penalty(self) -> float:
        return -math.log(self.discount)

    def parameters(self) -> list[Tensor]:
        return [self.damper.raw, self.explorer.raw]

    def exploring(self) -> bool:
        return self.damper.confidence() >= self.confidence_threshold and self.i_damp == self.i_expl

    def trace(self) -> dict:
        return {"i_damp": self.i_damp, "i_expl": self.i_expl,
                "p_damp": round(self.damper.confidence(), 6), "p_expl": round(self.explorer.confidence(), 6)}


def candidate_set(i_damp: int, max_steps: int, offsets=DEFAULT_OFFSETS) -> dict[int, int]:
    """Ordered ``{step: idx}`` of the local candidates, clamped into
    [0, max_steps - 1]; a step reached twice keeps its smaller idx."""
    if max_steps < 1:
        raise ConfigError(f"max_steps must be >= 1, got {max_steps}")
    out: dict[int, int] = {}
    for idx, off in enumerate(offsets):
        step = min(max(i_damp + off, 0), max_steps - 1)
        out.setdefault(step, idx)
    return out


def damper_label(state: TermState) -> int:
    if state.explorer.confidence() >= state.confidence_threshold:
        return state.i_expl
    return state.i_damp


def explorer_label(state: TermState, candidate_losses: Mapping[int, float]) -> int:
    if not state.exploring():
        return state.i_expl
    cands = candidate_set(state.i_damp, state.max_steps, state.offsets)
    missing = [s for s in cands if s not in candidate_losses]
    if missing:
        raise ConfigError(f"explorer_label: missing losses for candidate steps {missing}")
    best, best_score = None, math.inf
    for step, idx in sorted(cands.items(), key=lambda kv: kv[1]):
        score = float(candidate_losses[step]) + state.penalty * idx
        if score < best_score:
            best, best_score = step, score
    return best


def needed_steps(state: TermState) -> list[int]:
    """Steps whose model loss the next update needs, ascending."""
    steps = set(candidate_set(state.i_damp, state.max_steps, state.offsets))
    steps.update((state.i_damp, state.i_expl))
    return sorted(steps)


@dataclass
class TermLosses:
    loss_damp: Tensor
    loss_expl: Tensor
    main_step: int
    residual_steps: list[int]
    y_damp: int
    y_expl: int
    extra: dict = field(default_factory=dict)


def termination_losses(state: TermState, per_step_model_losses: Mapping[int, float]) -> TermLosses:
    """Cross-entropy losses of both predictors against their labels, plus
    where the main (``i_damp``) and residual model losses attach."""
    y_damp = damper_label(state)
    y_expl = explorer_label(state, per_step_model_losses)
    main = state.i_damp
    residual = [s for s in candidate_set(main, state.max_steps, state.offsets) if s != main]
    loss_damp = dm.cross_entropy_from_logits(state.damper.logits(), [y_damp])
    loss_expl = dm.cross_entropy_from_logits(state.explorer.logits(), [y_expl])
    return TermLosses(loss_damp, loss_expl, main, residual, y_damp, y_expl)


def terminated_step(state: TermState) -> int:
    return state.i_damp
