from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PARAM_NAMES


class DivergenceError(ArithmeticError):
    pass


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(
            {n: np.zeros_like(a) for n, a in params.items()},
            {n: np.zeros_like(a) for n, a in params.items()},
        )


def adam_step(params, grads, state, config, lr=None):
    """One Adam update in place, with L2 weight decay added to the gradient.

    ``lr`` overrides ``config.learning_rate`` (used by the plateau scheduler).
    """
    lr = config.learning_rate if lr is None else lr
    b1, b2, eps, wd = config.beta1, config.beta2, config.epsilon, config.weight_decay
    for name in PARAM_NAMES:
        if not np.isfinite(getattr(grads, name)).all():
            raise DivergenceError(f"non-finite gradient in {name}")
    state.step += 1
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name in PARAM_NAMES:
        theta = getattr(params, name)
        g = getattr(grads, name)
        if wd:
            g = g + wd * theta
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    params.version += 1
    return params, state
