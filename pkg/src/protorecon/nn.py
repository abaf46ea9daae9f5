"""Parameter containers and small layers built from autograd primitives."""
from __future__ import annotations

import math
import zlib

import numpy as np

from .autograd import Tensor, add, layer_norm, matmul


class Init:
    """Per-parameter seeded initialisation.

    Each parameter draws from its own generator keyed on (seed, name), so the
    values of a parameter never depend on which other modules were built.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def uniform(self, name: str, shape, bound: float) -> Tensor:
        return Tensor(self.rng(name).uniform(-bound, bound, size=shape), requires_grad=True, name=name)

    def normal(self, name: str, shape, std: float) -> Tensor:
        return Tensor(self.rng(name).normal(0.0, std, size=shape), requires_grad=True, name=name)

    def constant(self, name: str, shape, value: float) -> Tensor:
        return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._modules: dict[str, "Module"] = {}

    def add_param(self, attr: str, t: Tensor) -> Tensor:
        self._params[attr] = t
        setattr(self, attr, t)
        return t

    def add_module(self, attr: str, m: "Module") -> "Module":
        self._modules[attr] = m
        setattr(self, attr, m)
        return m

    def named_parameters(self, prefix: str = "", seen: set | None = None) -> list:
        seen = set() if seen is None else seen
        out = []
        for attr, t in self._params.items():
            if id(t) not in seen:
                seen.add(id(t))
                out.append((prefix + attr, t))
        for attr, m in self._modules.items():
            out += m.named_parameters(prefix + attr + ".", seen)
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for n, t in params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {n}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, init: Init, name: str, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.add_param("W", init.uniform(name + ".W", (d_in, d_out), bound))
        self.has_bias = bias
        if bias:
            self.add_param("b", init.uniform(name + ".b", (d_out,), bound))

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.W)
        return add(y, self.b) if self.has_bias else y


class LayerNorm(Module):
    def __init__(self, d: int, init: Init, name: str):
        super().__init__()
        self.add_param("gain", init.constant(name + ".gain", (d,), 1.0))
        self.add_param("bias", init.constant(name + ".bias", (d,), 0.0))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class RngStreams:
    """Named random streams derived from a fixed key.

    ``get(tag)`` always returns a fresh generator for the same (key, tag), so a
    computation draws identical dropout masks no matter which other
    computations ran before it. ``training=False`` turns every stream off.
    """

    def __init__(self, key: tuple, training: bool = True):
        self.key = tuple(int(k) for k in key)
        self.training = training

    def get(self, tag: str) -> np.random.Generator | None:
        if not self.training:
            return None
        return np.random.default_rng([*self.key, zlib.crc32(tag.encode("utf-8"))])

    def always(self, tag: str) -> np.random.Generator:
        """A stream that exists even in evaluation mode (sampling, augmentation)."""
        return np.random.default_rng([*self.key, zlib.crc32(tag.encode("utf-8"))])


EVAL = RngStreams((0,), training=False)
