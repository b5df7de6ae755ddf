"""ADAM updates and the L2 weight penalty."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, square, tsum
from .errors import ShapeError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, dtype=np.float64, **hyper):
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype), **hyper)


def adam_step(param, grad, state):
    """One bias-corrected ADAM update.

    Returns ``(new_param, new_state)`` and leaves the inputs untouched.
    """
    param = np.asarray(param)
    grad = np.asarray(grad)
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


@dataclass
class Adam:
    """Keeps one :class:`AdamState` per parameter tensor and applies updates in place.

    Parameters are replaced by new arrays rather than mutated so that values
    captured by an earlier graph stay intact. With ``flush_tiny`` set, entries
    smaller than the square root of the dtype's smallest normal number are set
    to zero: weights cut off from the loss otherwise decay geometrically into
    the subnormal range, where float32 matmuls run tens of times slower.
    """

    params: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flush_tiny: bool = True
    states: list = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.states = [
            AdamState.fresh(p.shape, p.dtype, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            for p in self.params
        ]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            new, self.states[i] = adam_step(p.data, p.grad, self.states[i])
            if self.flush_tiny:
                new[np.abs(new) < np.sqrt(np.finfo(new.dtype).tiny)] = 0
            p.data = new


def l2_penalty(params, coefficient):
    """``coefficient * sum(p**2)`` over ``params`` as a differentiable scalar."""
    if coefficient < 0:
        raise ValueError("L2 coefficient must be non-negative")
    params = list(params)
    if coefficient == 0 or not params:
        return Tensor(0.0)
    total = tsum(square(params[0]))
    for p in params[1:]:
        total = total + tsum(square(p))
    return total * coefficient
