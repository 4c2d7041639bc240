"""Named parameters and the Adam optimizer with per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from ..errors import UninitializedGradientError
from .tensor import Tensor


class LRGroup(str, Enum):
    """Learning-rate group a parameter belongs to."""

    COMPOSITION = "composition"
    ENCODER = "encoder"


class Parameter(Tensor):
    """A trainable leaf tensor with a model-unique dotted name."""

    def __init__(self, data, name: str, group: LRGroup | str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.group = LRGroup(group)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={list(self.shape)}, group={self.group.value})"


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params: Iterable[Parameter],
    state: AdamState,
    lr_table: Mapping[LRGroup | str, float],
) -> None:
    """Apply one bias-corrected Adam update, then clear the gradients.

    Every parameter must hold a gradient; nothing is modified otherwise.
    """
    params = list(params)
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise UninitializedGradientError(f"no gradient for parameter(s): {', '.join(missing)}")
    rates = {LRGroup(k): float(v) for k, v in lr_table.items()}

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.data)
            state.second_moment[p.name] = np.zeros_like(p.data)
        v = state.second_moment[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        g = g * g
        g *= 1.0 - b2
        v += g
        lr = rates[p.group]
        if lr != 0.0:
            # p -= lr * (m / bc1) / (sqrt(v / bc2) + eps), in place on one scratch buffer
            denom = v.copy()
            denom *= 1.0 / bc2
            np.sqrt(denom, out=denom)
            denom += state.eps
            np.divide(m, denom, out=denom)
            denom *= lr / bc1
            p.data -= denom
        p.zero_grad()
