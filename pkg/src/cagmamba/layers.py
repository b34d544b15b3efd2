"""Parameter containers and the affine / MLP building blocks."""

from __future__ import annotations

import numpy as np

from cagmamba import engine
from cagmamba.engine import Tensor


class Module:
    """Collects parameters from attributes in definition order.

    A tensor shared between two attributes is reported once, under the
    first name it was found at.
    """

    def named_parameters(self, prefix: str = "", _seen: set[int] | None = None) -> dict[str, Tensor]:
        seen = set() if _seen is None else _seen
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + ".", seen))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}.", seen))
        return out

    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.named_parameters().values()], dtype=np.int64))


def uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.W = engine.parameter(uniform(rng, d_in, (d_in, d_out)))
        self.b = engine.parameter(uniform(rng, d_in, (d_out,))) if bias else None

    def __call__(self, x) -> Tensor:
        return engine.linear(x, self.W, self.b)


class MLP(Module):
    """Affine map, or affine-SiLU-affine when ``hidden`` is set.

    Dropout, when enabled, acts on the hidden activation.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, hidden: int | None = None, dropout: float = 0.0):
        self.dropout = dropout
        if hidden:
            self.layers = [Linear(d_in, hidden, rng), Linear(hidden, d_out, rng)]
        else:
            self.layers = [Linear(d_in, d_out, rng)]

    def __call__(self, x, rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
        if len(self.layers) == 1:
            return self.layers[0](x)
        h = engine.silu(self.layers[0](x))
        h = engine.dropout(h, self.dropout, rng, train)
        return self.layers[1](h)


def mlp_params(d_in: int, d_out: int, hidden: int | None = None) -> int:
    if hidden:
        return d_in * hidden + hidden + hidden * d_out + d_out
    return d_in * d_out + d_out


def mlp_macs(rows: int, d_in: int, d_out: int, hidden: int | None = None) -> int:
    if hidden:
        return rows * (d_in * hidden + hidden * d_out)
    return rows * d_in * d_out
