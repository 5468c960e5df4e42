from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvariantError
from .tensor import Parameter


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``param.data``.

    Every parameter passed in must carry a gradient; frozen parameters should
    simply not be passed.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise InvariantError(f"parameter {p.name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        p.data -= state.lr * step
    return state


class Adam:
    """Thin stateful wrapper: holds the parameter list and its AdamState."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: list[Parameter] = [p for p in params if not p.frozen]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)
