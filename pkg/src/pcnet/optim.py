"""Adam optimizer with bias correction."""

import numpy as np


class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, params, learning_rate=0.001, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, state):
    """One Adam update over a {name: Tensor} parameter dict.

    Every parameter must carry a populated grad; grads are left untouched
    so the caller decides when to zero them.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)).astype(
            p.data.dtype, copy=False)
    return params


class Adam:
    """Convenience wrapper pairing a parameter dict with its AdamState."""

    def __init__(self, params, learning_rate=0.001, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.params = params
        self.state = AdamState(params, learning_rate, beta1, beta2, epsilon)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
