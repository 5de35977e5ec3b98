import numpy as np
from scipy.stats import truncnorm

from src.autograd import Tensor
from src.utils.errors import ContractError


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def conv_normal(rng, shape):
    """He-style init on fan-out, used for every convolution kernel."""
    c_out, c_in_g, kh, kw = shape
    return rng.normal(0.0, np.sqrt(2.0 / (kh * kw * c_out)), size=shape)


class ParamStore:
    """Ordered collection of named trainable tensors."""

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise ContractError(f'parameter {name!r} registered twice')
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_linear(self, name, rng, fan_in, fan_out):
        self.add(f'{name}.w', trunc_normal(rng, (fan_in, fan_out)))
        self.add(f'{name}.b', np.zeros(fan_out))

    def add_norm(self, name, channels):
        self.add(f'{name}.g', np.ones(channels))
        self.add(f'{name}.b', np.zeros(channels))

    def add_conv(self, name, rng, shape):
        self.add(f'{name}.w', conv_normal(rng, shape))
        self.add(f'{name}.b', np.zeros(shape[0]))

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def named_parameters(self):
        return list(self._params.items())

    def count(self):
        return int(sum(t.size for t in self._params.values()))

    def state(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state):
        missing = set(self._params) - set(state)
        if missing:
            raise ContractError(f'checkpoint lacks parameters: {sorted(missing)[:5]}')
        for name, tensor in self._params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ContractError(f'parameter {name!r}: checkpoint shape {value.shape} != {tensor.shape}')
            tensor.data[...] = value
