"""Layers, parameter containers and the Adam optimiser built on :mod:`glyrag.autodiff`."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from glyrag import autodiff as ad
from glyrag.autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


class Module:
    """Minimal parameter container with named, ordered parameters."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._modules: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, t: Tensor) -> Tensor:
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def add_module(self, name: str, m: "Module") -> "Module":
        self._modules[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for n, p in own.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = self.add_param("weight", uniform_init(rng, (d_in, d_out), d_in))
        self.bias = self.add_param("bias", uniform_init(rng, (d_out,), d_in)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = self.add_param("gamma", Tensor(np.ones(d)))
        self.beta = self.add_param("beta", Tensor(np.zeros(d)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Stack of linear layers with GELU between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.layers = [
            self.add_module(f"l{i}", Linear(a, b, rng)) for i, (a, b) in enumerate(zip(sizes, sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


def sinusoidal_pe(n_positions: int, d: int) -> np.ndarray:
    """``pe[p, 2i] = sin(p / 10000**(2i/d))`` and ``pe[p, 2i+1]`` the matching cosine."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    freq = np.exp(-np.log(10000.0) * i / d)
    pe = np.zeros((n_positions, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)[:, : d // 2]
    return pe


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    w_q: Sequence[Tensor],
    w_k: Sequence[Tensor],
    w_v: Sequence[Tensor],
    w_o: Tensor,
    scale: float | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with one projection triple per head.

    Inputs are ``(B, T, d)``. Head ``h`` computes
    ``softmax(q W_q[h] (k W_k[h])^T / sqrt(d_head)) v W_v[h]``; head outputs are
    concatenated and mapped by ``w_o``. ``scale`` overrides ``sqrt(d_head)``.
    """
    if not (len(w_q) == len(w_k) == len(w_v)):
        raise ValueError("per-head projection lists differ in length")
    heads, weights = [], []
    for wq, wk, wv in zip(w_q, w_k, w_v):
        q = ad.matmul(q_in, wq)
        k = ad.matmul(k_in, wk)
        v = ad.matmul(v_in, wv)
        s = scale if scale is not None else float(np.sqrt(wq.shape[-1]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / s)
        a = ad.softmax(scores, axis=-1)
        weights.append(a)
        heads.append(ad.matmul(a, v))
    cat = heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)
    out = ad.matmul(cat, w_o)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    """Multi-head attention whose width ``d`` is split evenly across heads."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, head_dim: int | None = None,
                 d_out: int | None = None):
        super().__init__()
        if head_dim is None:
            if d % n_heads:
                raise ValueError(f"width {d} not divisible by {n_heads} heads")
            head_dim = d // n_heads
        self.n_heads = n_heads
        self.head_dim = head_dim
        d_out = d if d_out is None else d_out
        self.w_q = [self.add_param(f"q{h}", uniform_init(rng, (d, head_dim), d)) for h in range(n_heads)]
        self.w_k = [self.add_param(f"k{h}", uniform_init(rng, (d, head_dim), d)) for h in range(n_heads)]
        self.w_v = [self.add_param(f"v{h}", uniform_init(rng, (d, head_dim), d)) for h in range(n_heads)]
        self.w_o = self.add_param("o", uniform_init(rng, (n_heads * head_dim, d_out), n_heads * head_dim))

    def __call__(self, q: Tensor, k: Tensor | None = None, v: Tensor | None = None, **kw):
        k = q if k is None else k
        v = k if v is None else v
        return multi_head_attention(q, k, v, self.w_q, self.w_k, self.w_v, self.w_o, **kw)


class LSTM(Module):
    """Stacked LSTM; gate order input, forget, candidate, output."""

    def __init__(self, d_in: int, hidden: int, layers: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.n_layers = layers
        self.cells = []
        for layer in range(layers):
            d = d_in if layer == 0 else hidden
            w_ih = self.add_param(f"w_ih{layer}", uniform_init(rng, (d, 4 * hidden), hidden))
            w_hh = self.add_param(f"w_hh{layer}", uniform_init(rng, (hidden, 4 * hidden), hidden))
            b = uniform_init(rng, (4 * hidden,), hidden)
            b.data[hidden: 2 * hidden] = 1.0
            b = self.add_param(f"b{layer}", b)
            self.cells.append((w_ih, w_hh, b))

    def __call__(self, seq: Tensor):
        return lstm_forward(seq, self.cells, self.hidden)


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor, hidden: int):
    gates = ad.add(ad.add(ad.matmul(x, w_ih), ad.matmul(h, w_hh)), b)
    i = ad.sigmoid(gates[..., 0:hidden])
    f = ad.sigmoid(gates[..., hidden: 2 * hidden])
    g = ad.tanh(gates[..., 2 * hidden: 3 * hidden])
    o = ad.sigmoid(gates[..., 3 * hidden:])
    c = ad.add(ad.mul(f, c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def lstm_forward(seq: Tensor, cells, hidden: int):
    """Run stacked cells over ``seq`` of shape ``(B, T, d_in)``.

    Returns the top-layer outputs ``(B, T, hidden)`` and a list of final
    ``(h, c)`` pairs, one per layer.
    """
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise ad.ShapeError(f"lstm expects (B, T>=1, d), got {seq.shape}")
    batch, steps = seq.shape[0], seq.shape[1]
    inputs = [seq[:, t, :] for t in range(steps)]
    finals = []
    for w_ih, w_hh, b in cells:
        h = Tensor(np.zeros((batch, hidden)))
        c = Tensor(np.zeros((batch, hidden)))
        outs = []
        for x in inputs:
            h, c = lstm_step(x, h, c, w_ih, w_hh, b, hidden)
            outs.append(h)
        finals.append((h, c))
        inputs = outs
    return ad.stack(inputs, axis=1), finals


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. ``None`` gradients are skipped."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
