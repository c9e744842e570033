"""Parameter containers and the small set of layers shared by every module."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape if shape is not None else (fan_out, fan_in))


class Module:
    """Base class: parameters are Tensor attributes with ``requires_grad``;
    submodules are Module attributes or lists of Modules."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64, copy=True)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """y = x W^T + b with W of shape (out, in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = T.parameter(xavier_uniform(rng, d_out, d_in))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.weight))
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = T.parameter(xavier_uniform(rng, n, d))

    def __call__(self, ids) -> Tensor:
        return T.take(self.weight, np.asarray(ids, dtype=np.int64), axis=0)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = T.parameter(np.ones(d))
        self.shift = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.shift


class FeedForward(Module):
    """Two affine layers with ReLU in between."""

    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, d_out: int | None = None):
        self.inner = Linear(d, d_ff, rng)
        self.outer = Linear(d_ff, d if d_out is None else d_out, rng)
        self.d_ff = d_ff

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


class LSTM(Module):
    """Single-layer LSTM over padded batches; returns the last valid hidden state."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.w_input = T.parameter(xavier_uniform(rng, 4 * hidden, d_in))
        self.w_hidden = T.parameter(xavier_uniform(rng, 4 * hidden, hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.bias = T.parameter(bias)
        self.hidden = hidden

    def __call__(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        n, steps, _ = x.shape
        H = self.hidden
        xw = T.matmul(x, T.transpose(self.w_input)) + self.bias
        h = T.Tensor(np.zeros((n, H)))
        c = T.Tensor(np.zeros((n, H)))
        wh = T.transpose(self.w_hidden)
        for t in range(steps):
            z = xw[:, t, :] + T.matmul(h, wh)
            i = T.sigmoid(z[:, :H])
            f = T.sigmoid(z[:, H:2 * H])
            g = T.tanh(z[:, 2 * H:3 * H])
            o = T.sigmoid(z[:, 3 * H:])
            c_new = f * c + i * g
            h_new = o * T.tanh(c_new)
            live = (np.asarray(lengths) > t).astype(np.float64)[:, None]
            if live.all():
                h, c = h_new, c_new
            else:
                h = h_new * live + h * (1.0 - live)
                c = c_new * live + c * (1.0 - live)
        return h
