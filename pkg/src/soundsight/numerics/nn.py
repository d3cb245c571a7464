"""Minimal layer library on top of :mod:`soundsight.numerics.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, get_default_dtype, matmul, relu, sigmoid, tanh


class Module:
    """Parameter container.  Parameters and sub-modules are discovered by
    walking instance attributes in definition order, so ``named_parameters``
    is stable across runs and usable as a checkpoint key order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

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
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _param(values: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(values, dtype=dtype), requires_grad=True)


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 gain: float | None = None, dtype=None):
        dtype = dtype or get_default_dtype()
        if gain is None:
            bound = np.sqrt(6.0 / in_features)  # He-uniform for ReLU stacks
            w = rng.uniform(-bound, bound, (in_features, out_features))
        else:
            w = orthogonal(rng, in_features, out_features, gain)
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros(out_features), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int | tuple[int, int],
                 rng: np.random.Generator, stride: int | tuple[int, int] = 1, dtype=None):
        dtype = dtype or get_default_dtype()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = in_channels * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        self.weight = _param(rng.uniform(-bound, bound, (out_channels, in_channels, kh, kw)), dtype)
        self.bias = _param(np.zeros(out_channels), dtype)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class LSTMCell(Module):
    """Single LSTM step; gates packed as [input, forget, cell, output]."""

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or get_default_dtype()
        self.hidden = hidden
        w_in = np.concatenate([orthogonal(rng, in_features, hidden) for _ in range(4)], axis=1)
        w_hh = np.concatenate([orthogonal(rng, hidden, hidden) for _ in range(4)], axis=1)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        self.w_in = _param(w_in, dtype)
        self.w_hh = _param(w_hh, dtype)
        self.bias = _param(b, dtype)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        gates = matmul(x, self.w_in) + matmul(h, self.w_hh) + self.bias
        H = self.hidden
        i = sigmoid(gates[:, :H])
        f = sigmoid(gates[:, H : 2 * H])
        g = tanh(gates[:, 2 * H : 3 * H])
        o = sigmoid(gates[:, 3 * H :])
        c_next = f * c + i * g
        h_next = o * tanh(c_next)
        return h_next, c_next


class MLP(Module):
    """Affine layers with ReLU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=None):
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x
