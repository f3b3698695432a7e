"""AdaMax, the infinity-norm variant of Adam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

U_FLOOR = 1e-12


@dataclass
class AdaMaxState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    m: np.ndarray | None = None
    u: np.ndarray | None = None

    def reset_moments(self, like: np.ndarray) -> None:
        self.step = 0
        self.m = np.zeros_like(like)
        self.u = np.zeros_like(like)


def adamax_step(state: AdaMaxState, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Apply one update in place and return ``param``.

    ``m`` is the biased first moment, ``u`` the exponentially weighted
    infinity norm; only ``m`` needs bias correction.
    """
    if param.shape != grad.shape:
        raise ValueError(f"param {param.shape} and grad {grad.shape} differ")
    if state.m is None or state.m.shape != param.shape:
        state.reset_moments(param)
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    np.maximum(state.beta2 * state.u, np.abs(grad), out=state.u)
    step_size = state.lr / (1.0 - state.beta1 ** state.step)
    param -= step_size * state.m / np.maximum(state.u, U_FLOOR)
    return param
