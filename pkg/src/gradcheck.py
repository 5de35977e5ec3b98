"""Central finite-difference checks against tape gradients."""
import numpy as np

from src.autograd import Tape, no_tape
from src.utils.errors import ContractError


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def _probe(f, tensor, flat_index, h):
    flat = tensor.data.reshape(-1)
    original = flat[flat_index]
    with no_tape():
        flat[flat_index] = original + h
        plus = f().item()
        flat[flat_index] = original - h
        minus = f().item()
    flat[flat_index] = original
    return (plus - minus) / (2.0 * h)


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between the tape gradient of scalar f(x) and central differences.

    `x` must be a leaf tensor with ``requires_grad=True``; it is perturbed in place and restored.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f'finite difference step {h} outside [1e-7, 1e-3]')
    with Tape() as tape:
        y = f(x)
    analytic = tape.backward(y)[x].reshape(-1)

    worst = 0.0
    for i in range(x.size):
        numeric = _probe(lambda: f(x), x, i, h)
        worst = max(worst, float(relative_error(analytic[i], numeric)))
    return worst


def check_parameters(loss_fn, params, h=1e-5, coords_per_param=3, rng=None):
    """Finite-difference check of a scalar loss over every named parameter tensor.

    Samples up to `coords_per_param` coordinates per tensor. Returns {name: max relative error}.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)

    errors = {}
    for name, tensor in params:
        analytic = grads[tensor].reshape(-1)
        count = min(coords_per_param, tensor.size)
        coords = rng.choice(tensor.size, size=count, replace=False)
        worst = 0.0
        for i in coords:
            numeric = _probe(loss_fn, tensor, int(i), h)
            worst = max(worst, float(relative_error(analytic[i], numeric)))
        errors[name] = worst
    return errors
