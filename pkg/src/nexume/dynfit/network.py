"""Small float64 networks with hand-written reverse-mode gradients.

Parametric layers (dense, conv2d, dwsconv2d) own "neurons": dense output
units or conv filters.  A neuron's fan-in row is axis 0 of ``W`` (and its
bias), which is how dropout masks, per-neuron bit widths and masked updates
are grouped.  Masks multiply the post-activation output of a neuron.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..devmodel import KernelKind
from ..errors import ShapeMismatch
from ..kernels.fixed import fake_quantize

ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid")


def _act(name, z):
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, a):
    if name == "linear":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


def quantize_rows(W: np.ndarray, bits) -> np.ndarray:
    """Fake-quantize each neuron's fan-in row at its own bit width (scale = row max)."""
    if bits is None:
        return W
    bits = np.broadcast_to(np.asarray(bits), (W.shape[0],))
    out = np.empty_like(W)
    for i in range(W.shape[0]):
        out[i] = fake_quantize(W[i], int(bits[i]))
    return out


class Layer:
    kind = "layer"
    neurons = 0
    activation = "linear"
    kernel = None  # KernelKind used for energy accounting
    unmasked_params: tuple = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape):
        return in_shape

    def macs(self, in_shape) -> int:
        return 0

    def spec(self) -> dict:
        return {"kind": self.kind}


class _Parametric(Layer):
    def _post(self, z, mask, gate):
        a = _act(self.activation, z)
        self._z, self._a = z, a
        self._mask, self._gate = mask, gate
        out = a
        if mask is not None:
            out = out * self._expand(mask, a)
        if gate is not None:
            out = out * self._expand(gate, a)
        self.last_out = a
        return out

    def _expand(self, v, like):
        v = np.asarray(v, dtype=np.float64)
        return v.reshape((1, -1) + (1,) * (like.ndim - 2))

    def _post_backward(self, dout):
        self.last_grad_out = dout
        a = self._a
        da = dout
        self.gate_grad = None
        if self._gate is not None:
            masked = a * self._expand(self._mask, a) if self._mask is not None else a
            axes = (0,) + tuple(range(2, a.ndim))
            self.gate_grad = (dout * masked).sum(axis=axes)
            da = da * self._expand(self._gate, a)
        if self._mask is not None:
            da = da * self._expand(self._mask, a)
        return da * _act_grad(self.activation, self._z, a)

    def weight_rows(self) -> np.ndarray:
        W = self.params["W"]
        return W.reshape(W.shape[0], -1)


class Dense(_Parametric):
    kind = "dense"
    kernel = KernelKind.MATVEC

    def __init__(self, n_in: int, n_out: int, activation: str = "linear", rng=None, W=None, b=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.activation = int(n_in), int(n_out), activation
        self.neurons = self.n_out
        lim = math.sqrt(6.0 / (n_in + n_out))
        self.params["W"] = np.array(W, dtype=np.float64) if W is not None else rng.uniform(-lim, lim, (n_out, n_in))
        self.params["b"] = np.array(b, dtype=np.float64) if b is not None else np.zeros(n_out)
        if self.params["W"].shape != (n_out, n_in) or self.params["b"].shape != (n_out,):
            raise ShapeMismatch("dense weight shapes do not match (n_out, n_in)")

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.n_in:
            raise ShapeMismatch(f"dense layer expects {self.n_in} inputs, got shape {in_shape}")
        return (self.n_out,)

    def macs(self, in_shape) -> int:
        return self.n_in * self.n_out

    def forward(self, x, mask=None, gate=None, bits=None):
        self._in_shape = x.shape
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.n_in:
            raise ShapeMismatch(f"dense layer expects {self.n_in} inputs, got {x2.shape[1]}")
        self._x = x2
        self._Wq = quantize_rows(self.params["W"], bits)
        return self._post(x2 @ self._Wq.T + self.params["b"], mask, gate)

    def backward(self, dout):
        dz = self._post_backward(dout)
        self.grads["W"] = dz.T @ self._x
        self.grads["b"] = dz.sum(axis=0)
        return (dz @ self._Wq).reshape(self._in_shape)

    def spec(self):
        return {"kind": self.kind, "shape": [self.n_out, self.n_in], "activation": self.activation}


def _windows(x, kh, kw):
    # (N, C, Ho, Wo, kh, kw)
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


class Conv2D(_Parametric):
    kind = "conv2d"
    kernel = KernelKind.CONV2D

    def __init__(self, c_in, c_out, kh, kw=None, activation="relu", rng=None, W=None, b=None):
        super().__init__()
        kw = kh if kw is None else kw
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kh, self.kw = int(c_in), int(c_out), int(kh), int(kw)
        self.activation = activation
        self.neurons = self.c_out
        fan_in = c_in * kh * kw
        lim = math.sqrt(6.0 / (fan_in + c_out * kh * kw))
        self.params["W"] = (
            np.array(W, dtype=np.float64) if W is not None else rng.uniform(-lim, lim, (c_out, c_in, kh, kw))
        )
        self.params["b"] = np.array(b, dtype=np.float64) if b is not None else np.zeros(c_out)
        if self.params["W"].shape != (c_out, c_in, kh, kw):
            raise ShapeMismatch("conv weight shape does not match (c_out, c_in, kh, kw)")

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.c_in or h < self.kh or w < self.kw:
            raise ShapeMismatch(f"conv2d {self.c_in}x{self.kh}x{self.kw} cannot take input {in_shape}")
        return (self.c_out, h - self.kh + 1, w - self.kw + 1)

    def macs(self, in_shape) -> int:
        _, ho, wo = self.output_shape(in_shape)
        return self.c_out * ho * wo * self.c_in * self.kh * self.kw

    def forward(self, x, mask=None, gate=None, bits=None):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"conv2d expects (N, {self.c_in}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        ho, wo = h - self.kh + 1, w - self.kw + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"kernel {self.kh}x{self.kw} does not fit {h}x{w}")
        self._x_shape = x.shape
        cols = _windows(x, self.kh, self.kw).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        self._cols = cols
        Wq = quantize_rows(self.params["W"].reshape(self.c_out, -1), bits)
        self._Wq = Wq
        z = (cols @ Wq.T).reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]
        return self._post(z, mask, gate)

    def backward(self, dout):
        dz = self._post_backward(dout)
        n, _, h, w = self._x_shape
        ho, wo = dz.shape[2], dz.shape[3]
        dz2 = dz.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.c_out)
        self.grads["W"] = (dz2.T @ self._cols).reshape(self.params["W"].shape)
        self.grads["b"] = dz2.sum(axis=0)
        dcols = (dz2 @ self._Wq).reshape(n, ho, wo, self.c_in, self.kh, self.kw)
        dx = np.zeros(self._x_shape)
        for i in range(self.kh):
            for j in range(self.kw):
                dx[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx

    def spec(self):
        return {
            "kind": self.kind,
            "shape": [self.c_out, self.c_in, self.kh, self.kw],
            "activation": self.activation,
        }


class DWSConv2D(_Parametric):
    """Depthwise (general ``kh x kw`` per channel) followed by a 1x1 pointwise mix.

    Neurons are the pointwise outputs; depthwise filters are never masked.
    """

    kind = "dwsconv2d"
    kernel = KernelKind.DWSCONV2D
    unmasked_params = ("dw",)

    def __init__(self, c_in, c_out, kh, kw=None, activation="relu", rng=None, dw=None, pw=None, b=None):
        super().__init__()
        kw = kh if kw is None else kw
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kh, self.kw = int(c_in), int(c_out), int(kh), int(kw)
        self.activation = activation
        self.neurons = self.c_out
        lim_d = math.sqrt(6.0 / (kh * kw * 2))
        lim_p = math.sqrt(6.0 / (c_in + c_out))
        self.params["dw"] = np.array(dw, dtype=np.float64) if dw is not None else rng.uniform(-lim_d, lim_d, (c_in, kh, kw))
        self.params["W"] = np.array(pw, dtype=np.float64) if pw is not None else rng.uniform(-lim_p, lim_p, (c_out, c_in))
        self.params["b"] = np.array(b, dtype=np.float64) if b is not None else np.zeros(c_out)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.c_in or h < self.kh or w < self.kw:
            raise ShapeMismatch(f"dwsconv2d cannot take input {in_shape}")
        return (self.c_out, h - self.kh + 1, w - self.kw + 1)

    def macs(self, in_shape) -> int:
        _, ho, wo = self.output_shape(in_shape)
        return self.c_in * ho * wo * self.kh * self.kw + self.c_out * self.c_in * ho * wo

    def forward(self, x, mask=None, gate=None, bits=None):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"dwsconv2d expects (N, {self.c_in}, H, W), got {x.shape}")
        self._x = x
        win = _windows(x, self.kh, self.kw)  # N C Ho Wo kh kw
        self._win = win
        d = np.einsum("nchwij,cij->nchw", win, self.params["dw"])
        self._d = d
        Wq = quantize_rows(self.params["W"], bits)
        self._Wq = Wq
        z = np.einsum("nchw,fc->nfhw", d, Wq) + self.params["b"][None, :, None, None]
        return self._post(z, mask, gate)

    def backward(self, dout):
        dz = self._post_backward(dout)
        self.grads["W"] = np.einsum("nfhw,nchw->fc", dz, self._d)
        self.grads["b"] = dz.sum(axis=(0, 2, 3))
        dd = np.einsum("nfhw,fc->nchw", dz, self._Wq)
        self.grads["dw"] = np.einsum("nchw,nchwij->cij", dd, self._win)
        dx = np.zeros_like(self._x)
        ho, wo = dd.shape[2], dd.shape[3]
        for i in range(self.kh):
            for j in range(self.kw):
                dx[:, :, i : i + ho, j : j + wo] += dd * self.params["dw"][None, :, i, j, None, None]
        return dx

    def spec(self):
        return {
            "kind": self.kind,
            "shape": [self.c_out, self.c_in, self.kh, self.kw],
            "activation": self.activation,
        }


class AvgPool(Layer):
    """Non-overlapping ``size x size`` average pooling; ``size=None`` pools globally."""

    kind = "avgpool"

    def __init__(self, size: int | None = None):
        super().__init__()
        self.size = size

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if self.size is None:
            return (c, 1, 1)
        return (c, h // self.size, w // self.size)

    def forward(self, x, **_):
        n, c, h, w = x.shape
        self._shape = x.shape
        if self.size is None:
            return x.mean(axis=(2, 3), keepdims=True)
        s = self.size
        ho, wo = h // s, w // s
        self._crop = (ho * s, wo * s)
        return x[:, :, : ho * s, : wo * s].reshape(n, c, ho, s, wo, s).mean(axis=(3, 5))

    def backward(self, dout):
        n, c, h, w = self._shape
        if self.size is None:
            return np.broadcast_to(dout / (h * w), self._shape).copy()
        s = self.size
        dx = np.zeros(self._shape)
        hh, ww = self._crop
        up = np.repeat(np.repeat(dout, s, axis=2), s, axis=3) / (s * s)
        dx[:, :, :hh, :ww] = up
        return dx

    def spec(self):
        return {"kind": self.kind, "shape": [] if self.size is None else [self.size]}


class Activation(Layer):
    kind = "activation"

    def __init__(self, activation: str):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    def forward(self, x, **_):
        self._z = x
        self._a = _act(self.activation, x)
        return self._a

    def backward(self, dout):
        return dout * _act_grad(self.activation, self._z, self._a)

    def spec(self):
        return {"kind": self.kind, "shape": [], "activation": self.activation}


LOSSES = ("mse", "ce")


def loss_and_grad(y: np.ndarray, target: np.ndarray, kind: str = "ce") -> tuple[float, np.ndarray]:
    """Mean-over-batch loss and its gradient w.r.t. ``y``.

    ``mse`` is ``0.5 * sum((y - t)**2)`` per sample; ``ce`` is softmax
    cross-entropy against integer labels.
    """
    n = y.shape[0]
    if kind == "mse":
        t = np.asarray(target, dtype=np.float64).reshape(y.shape)
        diff = y - t
        return 0.5 * float((diff * diff).sum()) / n, diff / n
    if kind == "ce":
        labels = np.asarray(target).astype(np.int64).reshape(-1)
        z = y - y.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e.sum(axis=1, keepdims=True)
        logp = z - np.log(s)
        loss = -float(logp[np.arange(n), labels].mean())
        g = e / s
        g[np.arange(n), labels] -= 1.0
        return loss, g / n
    raise ValueError(f"unknown loss {kind!r}")


class Network:
    """Sequential stack of layers over inputs of ``input_shape`` (no batch axis)."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], loss: str = "ce"):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        self.loss_kind = loss
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))

    # -- structure
    def parametric(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.neurons]

    def maskable(self) -> list[int]:
        """Hidden parametric layers; the output layer is never dropped."""
        return self.parametric()[:-1]

    def neuron_counts(self) -> dict[int, int]:
        return {i: self.layers[i].neurons for i in self.parametric()}

    def param_items(self):
        for i in self.parametric():
            for name, arr in self.layers[i].params.items():
                yield i, name, arr

    def n_params(self) -> int:
        return sum(a.size for _, _, a in self.param_items())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, _, a in self.param_items()])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for _, _, a in self.param_items():
            a[...] = vec[off : off + a.size].reshape(a.shape)
            off += a.size

    def copy(self) -> "Network":
        import copy

        return copy.deepcopy(self)

    def layer_macs(self) -> dict[int, int]:
        return {i: self.layers[i].macs(self.shapes[i]) for i in self.parametric()}

    # -- compute
    def forward(self, x, masks=None, quant=None, gates=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"network expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        masks = masks or {}
        gates = gates or {}
        self.inputs = []
        for i, layer in enumerate(self.layers):
            self.inputs.append(x)
            if layer.neurons:
                bits = quant.for_layer(i) if quant is not None else None
                x = layer.forward(x, mask=masks.get(i), gate=gates.get(i), bits=bits)
            else:
                x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray) -> dict[tuple[int, str], np.ndarray]:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return {(i, name): self.layers[i].grads[name] for i, name, _ in self.param_items()}

    def loss(self, x, target, masks=None, quant=None, gates=None) -> float:
        return loss_and_grad(self.forward(x, masks, quant, gates), target, self.loss_kind)[0]

    def loss_and_grads(self, x, target, masks=None, quant=None, gates=None):
        y = self.forward(x, masks, quant, gates)
        loss, dy = loss_and_grad(y, target, self.loss_kind)
        return loss, self.backward(dy)

    def predict(self, x, masks=None, quant=None) -> np.ndarray:
        return self.forward(x, masks, quant).argmax(axis=1)

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]


def build_mlp(sizes: Sequence[int], activation="tanh", out_activation="linear", loss="mse", seed=0) -> Network:
    rng = np.random.default_rng(seed)
    layers = []
    for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
        act = out_activation if k == len(sizes) - 2 else activation
        layers.append(Dense(a, b, act, rng=rng))
    return Network(layers, (sizes[0],), loss)


def build_cnn(
    input_shape=(1, 12, 12),
    convs: Sequence[tuple[int, int, int]] = ((8, 3, 3), (16, 3, 3)),
    n_classes: int = 4,
    pool: int | None = None,
    seed: int = 0,
    activation: str = "relu",
) -> Network:
    """Conv stack, average pooling, dense classifier.  ``convs`` holds ``(filters, kh, kw)``."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    shape = tuple(input_shape)
    for f, kh, kw in convs:
        layer = Conv2D(shape[0], f, kh, kw, activation, rng=rng)
        shape = layer.output_shape(shape)
        layers.append(layer)
    pool_layer = AvgPool(pool)
    shape = pool_layer.output_shape(shape)
    layers.append(pool_layer)
    layers.append(Dense(int(np.prod(shape)), n_classes, "linear", rng=rng))
    return Network(layers, input_shape, "ce")
