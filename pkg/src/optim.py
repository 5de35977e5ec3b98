"""AdamW with decoupled weight decay and a warmup/linear-decay learning-rate schedule."""
from dataclasses import dataclass, field

import numpy as np

from src.utils.errors import ContractError, NonFiniteError


@dataclass
class OptimState:
    lr: float
    weight_decay: float = 0.01
    warmup_steps: int = 150
    total_steps: int = 4000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ContractError(f'bad schedule: warmup {self.warmup_steps}, total {self.total_steps}')

    def state(self, prefix):
        out = {f'{prefix}/step': np.array([self.step], dtype=np.float64)}
        out.update({f'{prefix}/m/{k}': v.copy() for k, v in self.m.items()})
        out.update({f'{prefix}/v/{k}': v.copy() for k, v in self.v.items()})
        return out

    def load_state(self, state, prefix):
        self.step = int(state[f'{prefix}/step'][0])
        for key, value in state.items():
            if key.startswith(f'{prefix}/m/'):
                self.m[key[len(prefix) + 3:]] = np.array(value)
            elif key.startswith(f'{prefix}/v/'):
                self.v[key[len(prefix) + 3:]] = np.array(value)


def learning_rate(state, t):
    """Piecewise-linear: base * t / warmup up to warmup, then linear decay to 0 at total_steps.

    t = 0 is treated as t = 1 so the first update is never a zero step.
    """
    t = max(t, 1)
    if state.warmup_steps and t <= state.warmup_steps:
        return state.lr * t / state.warmup_steps
    if t >= state.total_steps:
        return 0.0
    return state.lr * (state.total_steps - t) / (state.total_steps - state.warmup_steps)


def optimizer_step(params, grads, state):
    """One in-place AdamW update of every (name, tensor) in `params`; returns the lr used."""
    for name, _ in params:
        if not np.all(np.isfinite(grads[name])):
            bad = int(np.sum(~np.isfinite(grads[name])))
            raise NonFiniteError(f'{bad} non-finite gradient entries for {name!r} at step {state.step + 1}')

    state.step += 1
    lr = learning_rate(state, state.step)
    beta1, beta2 = state.betas
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, tensor in params:
        g = grads[name]
        m = state.m.get(name, np.zeros_like(tensor.data))
        v = state.v.get(name, np.zeros_like(tensor.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        tensor.data *= 1.0 - lr * state.weight_decay
        tensor.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return lr
