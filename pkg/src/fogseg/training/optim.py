"""
ADAM optimizer
--------------

Bias-corrected ADAM over a list of named parameters, applied in registry order. Moment
buffers are keyed by parameter name so the state survives a checkpoint round trip.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.tensor import Tensor
from ..errors import CheckpointError, FogSegError

NamedParams = Sequence[Tuple[str, Tensor]]


class AdamState:
    def __init__(self, params: NamedParams, lr: float = 5e-3, beta1: float = 0.5, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.params: List[Tuple[str, Tensor]] = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in self.params}

    def zero_grad(self) -> None:
        for _, tensor in self.params:
            tensor.grad = None

    def step(self) -> None:
        adam_step(self.params, self)

    # ---------------------------------------------------------------- persistence

    def state_dict(self) -> Dict[str, object]:
        return {'step': self.step_count, 'm': dict(self.m), 'v': dict(self.v)}

    def load_state_dict(self, state: Dict[str, object]) -> None:
        names = [n for n, _ in self.params]
        m, v = state['m'], state['v']
        if sorted(m) != sorted(names) or sorted(v) != sorted(names):
            raise CheckpointError("optimizer state does not match the parameter set")
        self.step_count = int(state['step'])
        for name, tensor in self.params:
            self.m[name] = np.array(m[name], dtype=tensor.dtype).reshape(tensor.shape)
            self.v[name] = np.array(v[name], dtype=tensor.dtype).reshape(tensor.shape)


def adam_step(params: NamedParams, state: AdamState, grads: Optional[Dict[str, np.ndarray]] = None) -> None:
    """
    One bias-corrected ADAM update in parameter order.

    ``grads`` defaults to each tensor's ``.grad``.

    Raises:
        FogSegError: a parameter without a gradient (named in the message)
    """
    for name, tensor in params:
        grad = grads.get(name) if grads is not None else tensor.grad
        if grad is None:
            raise FogSegError(f"missing gradient for parameter '{name}'")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, tensor in params:
        grad = grads[name] if grads is not None else tensor.grad
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * grad
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data = (tensor.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(tensor.dtype)
