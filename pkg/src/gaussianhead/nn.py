"""Dense / 3x3-conv layers, MLPs, and the Adam optimizer on the autodiff tape."""
from __future__ import annotations

import numpy as np

from .autodiff import ShapeMismatchError, Tensor, custom_op

_ACTIVATIONS = ("relu", "tanh", "sigmoid", "none")


def _apply_activation(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return x.relu()
    if name == "tanh":
        return x.tanh()
    if name == "sigmoid":
        return x.sigmoid()
    if name == "none":
        return x
    raise ValueError(f"unknown activation {name!r}")


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer:
    """Affine map on (N, in) batches: x @ W + b, then activation."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "none",
                 rng: np.random.Generator | None = None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (in_dim, out_dim), in_dim),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.weight.data.shape[0]:
            raise ShapeMismatchError(
                f"dense expects (N, {self.weight.data.shape[0]}), got {x.data.shape}")
        return _apply_activation(x @ self.weight + self.bias, self.activation)

    def parameters(self):
        return [self.weight, self.bias]


def _conv_cols(xp: np.ndarray) -> np.ndarray:
    """View a zero-padded (H+2, W+2, C) array as (H, W, 3, 3, C) patches."""
    h, w, c = xp.shape[0] - 2, xp.shape[1] - 2, xp.shape[2]
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(h, w, 3, 3, c), strides=(s[0], s[1], s[0], s[1], s[2]))


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 3x3 convolution on an (H, W, Cin) tensor.

    weight: (3, 3, Cin, Cout); bias: (Cout,).
    """
    if x.data.ndim != 3 or x.data.shape[2] != weight.data.shape[2]:
        raise ShapeMismatchError(
            f"conv3x3 expects (H, W, {weight.data.shape[2]}), got {x.data.shape}")
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    cols = _conv_cols(xp)
    out = np.einsum("hwijc,ijco->hwo", cols, weight.data, optimize=True) + bias.data

    def backward(g):
        gw = np.einsum("hwijc,hwo->ijco", cols, g, optimize=True)
        gb = g.sum(axis=(0, 1))
        gp = np.pad(g, ((1, 1), (1, 1), (0, 0)))
        gcols = _conv_cols(gp)
        gx = np.einsum("hwijo,ijco->hwc", gcols, weight.data[::-1, ::-1], optimize=True)
        return gx, gw, gb

    return custom_op((x, weight, bias), out, backward)


class ConvLayer:
    """3x3 same-padding convolution layer with activation."""

    def __init__(self, in_ch: int, out_ch: int, activation: str = "none",
                 rng: np.random.Generator | None = None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (3, 3, in_ch, out_ch), 9 * in_ch),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return _apply_activation(conv3x3(x, self.weight, self.bias), self.activation)

    def parameters(self):
        return [self.weight, self.bias]


class MLP:
    """Stack of dense layers with a shared hidden activation, linear output."""

    def __init__(self, dims, hidden_activation: str = "relu",
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.layers = []
        for i in range(len(dims) - 1):
            act = hidden_activation if i < len(dims) - 2 else "none"
            self.layers.append(DenseLayer(dims[i], dims[i + 1], act, rng))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class ConvStack:
    """Stack of 3x3 conv layers on (H, W, C) maps, linear output layer."""

    def __init__(self, channels, hidden_activation: str = "relu",
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.layers = []
        for i in range(len(channels) - 1):
            act = hidden_activation if i < len(channels) - 2 else "none"
            self.layers.append(ConvLayer(channels[i], channels[i + 1], act, rng))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


def zero_init_last_layer(net, bias: np.ndarray | None = None):
    """Zero the final layer's weight (and bias unless an override is given).

    With zero weights the network output equals the final bias for any
    input, which is how motion fields guarantee identity at initialization.
    """
    if not net.layers:
        raise ValueError("network has no layers")
    last = net.layers[-1]
    last.weight.data[...] = 0.0
    if bias is None:
        last.bias.data[...] = 0.0
    else:
        last.bias.data[...] = np.asarray(bias, dtype=np.float64)
    return net


class Adam:
    """Standard Adam with bias correction over a list of parameter tensors."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** t)
            v_hat = self.v[i] / (1 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self):
        """Moment arrays and step counter for checkpointing, keyed by index."""
        out = {"adam/step": np.array([float(self.step_count)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam/m{i}"] = m
            out[f"adam/v{i}"] = v
        return out

    def load_state_tensors(self, state: dict):
        self.step_count = int(state["adam/step"][0])
        for i in range(len(self.params)):
            self.m[i] = state[f"adam/m{i}"].reshape(self.m[i].shape).copy()
            self.v[i] = state[f"adam/v{i}"].reshape(self.v[i].shape).copy()
