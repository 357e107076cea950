"""Gradient descent with an adaptive learning rate and one-step rollback.

The caller evaluates the error and gradient at the weights it was handed and
passes them in.  If the error did not increase relative to the last accepted
point, the point is accepted, the rate grows by ``up_factor`` and a new step
is taken from it.  Otherwise the point is rejected: the weights return to the
last accepted point, the rate shrinks by ``down_factor`` and the step from
that point is retried with the stored gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DivergenceError, RejectedInput

LR_MIN = 1e-8
LR_MAX = 10.0


@dataclass
class AlrState:
    lr: float = 0.01
    up_factor: float = 1.05
    down_factor: float = 0.5
    prev_error: float = math.inf
    prev_w: np.ndarray | None = None
    prev_grad: np.ndarray | None = None
    rejected: bool = False

    def __post_init__(self):
        if not self.lr > 0 or not self.up_factor > 1 or not 0 < self.down_factor < 1:
            raise RejectedInput("need lr > 0, up_factor > 1, 0 < down_factor < 1")


def alr_step(state: AlrState, w, grad, error: float):
    """Returns ``(new_w, new_state)``; ``new_state.rejected`` flags a rollback."""
    w = np.asarray(w, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (np.all(np.isfinite(grad)) and math.isfinite(error)):
        raise DivergenceError("non-finite gradient or error in adaptive-rate step")
    if error <= state.prev_error or state.prev_w is None:
        lr = min(state.lr * state.up_factor, LR_MAX)
        new_w = w - lr * grad
        return new_w, replace(state, lr=lr, prev_error=float(error), prev_w=w.copy(),
                              prev_grad=grad.copy(), rejected=False)
    lr = max(state.lr * state.down_factor, LR_MIN)
    new_w = state.prev_w - lr * state.prev_grad
    return new_w, replace(state, lr=lr, rejected=True)
