"""Layers, parameter initialization, and the Adam optimizer.

Parameter containers are plain dataclasses of Tensors; `named_tensors` walks
them into a flat {dotted.name: Tensor} dict used by the optimizer and the
checkpoint writer.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator

import numpy as np

from . import engine as eg
from .engine import Tensor
from .convops import conv2d, conv2d_transpose


@dataclass
class DenseParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]


@dataclass
class ConvParams:
    weight: Tensor  # [C_out, C_in, kh, kw]
    bias: Tensor  # [C_out]
    stride: int = 1
    pad: int = 0
    transpose: bool = False


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class LstmCellParams:
    """Gate weights over the concatenated [q*_prev, z] input.

    All four gate weights share shape [h, h + d_r + n_z]; q*_prev is the
    previous hidden state concatenated with the previous attention readout.
    """

    w_o: Tensor
    b_o: Tensor
    w_f: Tensor
    b_f: Tensor
    w_i: Tensor
    b_i: Tensor
    w_h: Tensor
    b_h: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.w_o.shape[0]


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a nested parameter structure into {dotted.name: Tensor}."""
    out: dict[str, Tensor] = {}

    def walk(node, path):
        if isinstance(node, Tensor):
            out[path] = node
        elif is_dataclass(node):
            for f in fields(node):
                v = getattr(node, f.name)
                if isinstance(v, (Tensor, list, tuple, dict)) or is_dataclass(v):
                    walk(v, f"{path}.{f.name}" if path else f.name)
        elif isinstance(node, (list, tuple)):
            for i, v in enumerate(node):
                walk(v, f"{path}.{i}")
        elif isinstance(node, dict):
            for k in sorted(node):
                walk(node[k], f"{path}.{k}")

    walk(obj, prefix)
    return out


def set_requires_grad(obj, flag: bool) -> None:
    for t in named_tensors(obj).values():
        t.requires_grad = flag


def zero_grads(obj) -> None:
    for t in named_tensors(obj).values():
        t.grad = None


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> Tensor:
    """Zero-mean weights with variance 2/fan_in."""
    std = np.sqrt(2.0 / fan_in)
    data = rng.normal(0.0, std, size=shape)
    return Tensor(data.astype(dtype or eg.default_dtype), requires_grad=True)


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, dtype=None) -> DenseParams:
    return DenseParams(
        weight=he_normal(rng, (n_out, n_in), fan_in=n_in, dtype=dtype),
        bias=Tensor(np.zeros(n_out, dtype=dtype or eg.default_dtype), requires_grad=True),
    )


def init_conv(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    k: int,
    stride: int,
    pad: int,
    transpose: bool = False,
    dtype=None,
) -> ConvParams:
    # transpose kernels live in [input_channels, output_channels, kh, kw]
    # because the layer input sits in the matching conv's output space
    shape = (c_in, c_out, k, k) if transpose else (c_out, c_in, k, k)
    return ConvParams(
        weight=he_normal(rng, shape, fan_in=c_in * k * k, dtype=dtype),
        bias=Tensor(np.zeros(c_out, dtype=dtype or eg.default_dtype), requires_grad=True),
        stride=stride,
        pad=pad,
        transpose=transpose,
    )


def init_layer_norm(channels: int, dtype=None) -> LayerNormParams:
    dt = dtype or eg.default_dtype
    return LayerNormParams(
        gain=Tensor(np.ones((channels, 1, 1), dtype=dt), requires_grad=True),
        bias=Tensor(np.zeros((channels, 1, 1), dtype=dt), requires_grad=True),
    )


def init_lstm(
    rng: np.random.Generator, hidden: int, input_dim: int, dtype=None
) -> LstmCellParams:
    """input_dim is the full [q*_prev, z] length. Forget-gate bias starts at 1."""
    dt = dtype or eg.default_dtype

    def w():
        return he_normal(rng, (hidden, input_dim), fan_in=input_dim, dtype=dt)

    def b(fill=0.0):
        return Tensor(np.full(hidden, fill, dtype=dt), requires_grad=True)

    return LstmCellParams(
        w_o=w(), b_o=b(), w_f=w(), b_f=b(1.0), w_i=w(), b_i=b(), w_h=w(), b_h=b()
    )


def dense(x: Tensor, p: DenseParams) -> Tensor:
    """x: [in] or [N, in]."""
    if x.ndim == 1:
        return eg.add(eg.matmul(p.weight, x), p.bias)
    y = eg.matmul(x, eg.transpose(p.weight))
    return eg.add(y, eg.broadcast_to(p.bias, y.shape))


def conv_layer(x: Tensor, p: ConvParams) -> Tensor:
    if p.transpose:
        y = conv2d_transpose(x, p.weight, p.stride, p.pad)
    else:
        y = conv2d(x, p.weight, p.stride, p.pad)
    c = p.bias.shape[0]
    return eg.add(y, eg.broadcast_to(eg.reshape(p.bias, (c, 1, 1)), y.shape))


def layer_norm_nd(x: Tensor, p: LayerNormParams, batched: bool) -> Tensor:
    return eg.layer_norm(x, p.gain, p.bias, num_batch_axes=1 if batched else 0)


def lstm_cell(
    z: Tensor, q_star_prev: Tensor, cell_state_prev: Tensor, p: LstmCellParams
) -> tuple[Tensor, Tensor]:
    """One step of the standard LSTM cell.

    Accepts vectors ([n_z], [h+d_r], [h]) or row-batches of them. Returns
    (hidden q_t, cell_state_t).
    """
    batched = z.ndim == 2
    axis = 1 if batched else 0
    u = eg.concat([q_star_prev, z], axis=axis)

    def gate(w, b, act):
        if batched:
            y = eg.add(eg.matmul(u, eg.transpose(w)), eg.broadcast_to(b, (u.shape[0], b.shape[0])))
        else:
            y = eg.add(eg.matmul(w, u), b)
        return act(y)

    o = gate(p.w_o, p.b_o, eg.sigmoid)
    f = gate(p.w_f, p.b_f, eg.sigmoid)
    i = gate(p.w_i, p.b_i, eg.sigmoid)
    h_tilde = gate(p.w_h, p.b_h, eg.tanh)
    cell = eg.add(eg.mul(f, cell_state_prev), eg.mul(i, h_tilde))
    q = eg.mul(o, eg.tanh(cell))
    return q, cell


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
        t=0,
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    alpha: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> AdamState:
    """Bias-corrected Adam update, in place on params."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise eg.EngineError(f"adam_step shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.data -= alpha * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    """Convenience wrapper that reads .grad buffers from a parameter dict."""

    def __init__(self, params: dict[str, Tensor], alpha, beta1, beta2, eps):
        self.params = params
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = adam_init(params)

    def step(self) -> None:
        grads = {
            k: p.grad for k, p in self.params.items() if p.grad is not None
        }
        adam_step(
            self.params, grads, self.state, self.alpha, self.beta1, self.beta2, self.eps
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def count_params(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def iter_leaves(obj) -> Iterator[Tensor]:
    yield from named_tensors(obj).values()
