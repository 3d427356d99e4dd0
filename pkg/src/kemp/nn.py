"""Parameter containers and layers built on :mod:`kemp.autodiff`."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Walks attributes in definition order to collect named parameters."""

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

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.weight = init_uniform(rng, (n_in, n_out), n_in)
        self.bias = init_uniform(rng, (n_out,), n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """ReLU hidden layers; the output layer is linear."""

    def __init__(self, rng: np.random.Generator, sizes: Sequence[int]):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [Linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        return self.layers[-1](x)


class LSTMCell(Module):
    """Standard LSTM: sigmoid input/forget/output gates, tanh candidate.

    The input weight is split in two so that a step-invariant part of the
    input (``static``) can be projected once per sequence via
    :meth:`project_static` instead of at every step.
    """

    def __init__(self, rng: np.random.Generator, n_static: int, n_dynamic: int, n_hidden: int):
        fan_in = n_static + n_dynamic + n_hidden
        self.hidden = n_hidden
        self.static_weight = init_uniform(rng, (n_static, 4 * n_hidden), fan_in) if n_static else None
        self.weight = init_uniform(rng, (n_dynamic + n_hidden, 4 * n_hidden), fan_in)
        self.bias = init_uniform(rng, (4 * n_hidden,), fan_in)

    def project_static(self, static: Tensor) -> Tensor:
        return ad.matmul(static, self.static_weight) + self.bias

    def __call__(self, dynamic: Tensor, state: tuple[Tensor, Tensor], static_proj: Tensor | None = None):
        h, c = state
        z = ad.matmul(ad.concat([dynamic, h], axis=-1), self.weight)
        z = z + (static_proj if static_proj is not None else self.bias)
        n = self.hidden
        gates = ad.sigmoid(z[..., : 3 * n])
        i, f, o = gates[..., :n], gates[..., n : 2 * n], gates[..., 2 * n :]
        g = ad.tanh(z[..., 3 * n :])
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        return h_new, c_new
