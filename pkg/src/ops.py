"""Differentiable kernels on `Tensor`.

Each op computes its forward result with numpy and registers a backward closure through
`record`. The gradient math of the heavier ops lives in module-level ``_*_backward`` helpers.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from src.autograd import Tensor, record
from src.utils.errors import ContractError, ShapeError


SQRT_HALF = np.sqrt(0.5)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        'add',
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        'sub',
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        'mul',
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        'div',
    )


def neg(a):
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), 'neg')


def exp(a):
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), 'exp')


def log(a):
    if np.any(a.data <= 0):
        raise ContractError('log of a non-positive value')
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def _gelu_derivative(x):
    cdf = 0.5 * (1.0 + erf(x * SQRT_HALF))
    return cdf + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    out = x.data * 0.5 * (1.0 + erf(x.data * SQRT_HALF))
    return record(out, (x,), lambda g: (g * _gelu_derivative(x.data),), 'gelu')


def leaky_relu(x, slope=0.2):
    positive = x.data > 0
    return record(
        np.where(positive, x.data, slope * x.data), (x,),
        lambda g: (np.where(positive, g, slope * g),),
        'leaky_relu',
    )


def softplus(x):
    """log(1 + e^x), evaluated stably; log-sigmoid(x) == -softplus(-x)."""
    return record(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),), 'softplus')


# reductions and shape

def sum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(out), (x,), backward, 'sum')


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape):
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), 'reshape')


def transpose(x, axes):
    inverse = np.argsort(axes)
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), 'transpose')


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != axis
        ):
            raise ShapeError(f'concat shape mismatch: {[t.shape for t in tensors]} along axis {axis}')
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        'concat',
    )


def tokens_to_map(x, h, w):
    """[h*w, C] row-major tokens to a [C, h, w] feature map."""
    if x.shape[0] != h * w:
        raise ShapeError(f'{x.shape[0]} tokens cannot form a {h}x{w} grid')
    return transpose(reshape(x, (h, w, x.shape[1])), (2, 0, 1))


def map_to_tokens(x):
    c, h, w = x.shape
    return reshape(transpose(x, (1, 2, 0)), (h * w, c))


# linear algebra

def _matmul_backward(a, b, g):
    grad_a = np.matmul(g, np.swapaxes(b, -1, -2))
    grad_b = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


def matmul(a, b):
    """Batched matrix product; leading dimensions broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul shape mismatch: {a.shape} @ {b.shape}')
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f'matmul shape mismatch: {a.shape} @ {b.shape}') from e
    return record(out, (a, b), lambda g: _matmul_backward(a.data, b.data, g), 'matmul')


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# normalisation

def _softmax_backward(s, g):
    return s * (g - np.sum(g * s, axis=-1, keepdims=True))


def softmax_lastdim(x):
    if x.shape[-1] < 1:
        raise ShapeError('softmax over an empty last dimension')
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)
    return record(s, (x,), lambda g: (_softmax_backward(s, g),), 'softmax')


def log_softmax_lastdim(x):
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    s = np.exp(out)
    return record(
        out, (x,),
        lambda g: (g - s * np.sum(g, axis=-1, keepdims=True),),
        'log_softmax',
    )


def _layer_norm_backward(xhat, inv_std, gamma, g):
    channels = xhat.shape[-1]
    g_xhat = g * gamma
    grad_x = inv_std / channels * (
        channels * g_xhat
        - np.sum(g_xhat, axis=-1, keepdims=True)
        - xhat * np.sum(g_xhat * xhat, axis=-1, keepdims=True)
    )
    grad_gamma = (g * xhat).reshape(-1, channels).sum(axis=0)
    grad_beta = g.reshape(-1, channels).sum(axis=0)
    return grad_x, grad_gamma, grad_beta


def layer_norm(x, gamma, beta, eps=1e-6):
    if eps <= 0:
        raise ContractError(f'layer_norm eps must be positive, got {eps}')
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f'layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}')
    centered = x.data - np.mean(x.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return record(
        xhat * gamma.data + beta.data, (x, gamma, beta),
        lambda g: _layer_norm_backward(xhat, inv_std, gamma.data, g),
        'layer_norm',
    )


# spatial

def _conv2d_backward(windows, weight, g, groups, padded_shape, stride, padding, in_shape):
    c_out, cin_g, kh, kw = weight.shape
    c_in = windows.shape[0]
    _, out_h, out_w = g.shape
    g_r = g.reshape(groups, c_out // groups, out_h, out_w)
    w_r = weight.reshape(groups, c_out // groups, cin_g, kh, kw)
    win_r = windows.reshape(groups, cin_g, out_h, out_w, kh, kw)

    grad_w = np.einsum('gohw,gchwij->gocij', g_r, win_r, optimize=True).reshape(weight.shape)
    grad_win = np.einsum('gohw,gocij->gchwij', g_r, w_r, optimize=True).reshape(c_in, out_h, out_w, kh, kw)

    grad_padded = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += grad_win[..., i, j]
    _, h, w = in_shape
    return grad_padded[:, padding:padding + h, padding:padding + w], grad_w


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Direct cross-correlation of a [C_in, H, W] map with [C_out, C_in/groups, kh, kw] weights."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f'conv2d expects [C,H,W] input and 4-d weights, got {x.shape} and {weight.shape}')
    c_in, h, w = x.shape
    c_out, cin_g, kh, kw = weight.shape
    if c_in % groups or c_out % groups or cin_g * groups != c_in:
        raise ShapeError(f'conv2d channels do not split into {groups} groups: input {x.shape}, weight {weight.shape}')
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f'conv2d output size non-positive: input {x.shape}, kernel {kh}x{kw}, stride {stride}, padding {padding}'
        )

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]
    w_r = weight.data.reshape(groups, c_out // groups, cin_g, kh, kw)
    win_r = windows.reshape(groups, cin_g, out_h, out_w, kh, kw)
    out = np.einsum('gocij,gchwij->gohw', w_r, win_r, optimize=True).reshape(c_out, out_h, out_w)

    inputs = (x, weight)
    if bias is not None:
        out = out + bias.data[:, None, None]
        inputs = (x, weight, bias)

    def backward(g):
        grad_x, grad_w = _conv2d_backward(windows, weight.data, g, groups, padded.shape, stride, padding, x.shape)
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(1, 2))

    return record(out, inputs, backward, 'conv2d')


def interpolation_matrix(n_in, n_out):
    """Row-stochastic [n_out, n_in] linear interpolation weights, half-pixel centres."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    matrix = np.zeros((n_out, n_in))
    np.add.at(matrix, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(matrix, (np.arange(n_out), hi), frac)
    return matrix


def upsample_bilinear(x, out_h, out_w):
    """Bilinear upsampling of a [C, H, W] map (align-corners=false)."""
    if x.ndim != 3:
        raise ShapeError(f'upsample_bilinear expects [C,H,W], got {x.shape}')
    _, h, w = x.shape
    if out_h < h or out_w < w:
        raise ContractError(f'upsample_bilinear cannot shrink {h}x{w} to {out_h}x{out_w}')
    if (out_h, out_w) == (h, w):
        return record(x.data.copy(), (x,), lambda g: (g,), 'upsample')
    rows = interpolation_matrix(h, out_h)
    cols = interpolation_matrix(w, out_w)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return record(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),), 'upsample')
