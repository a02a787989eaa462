"""Parameterized layers on top of the autodiff engine.

A `Module` is a lightweight container that registers child modules and
parameter tensors by attribute assignment, so every parameter gets a stable
dotted name (used by checkpoints and the optimizer).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHT_INIT_STD = 0.02


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._modules.items():
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy arrays into parameters, validating names and shapes."""
        params = self.named_parameters()
        missing = [prefix + k for k in params if prefix + k not in state]
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {missing[:4]}...")
        for name, p in params.items():
            arr = np.asarray(state[prefix + name])
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {prefix + name}: expected {p.data.shape}, got {arr.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix).items()}


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _init_weight(rng: np.random.Generator, shape, dtype) -> Tensor:
    w = rng.normal(0.0, WEIGHT_INIT_STD, size=shape).astype(dtype)
    return Tensor(w, requires_grad=True)


def _init_bias(n, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, pad_mode="zeros", dtype=np.float32):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode
        self.w = _init_weight(rng, (out_ch, in_ch, kernel, kernel), dtype)
        self.b = _init_bias(out_ch, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding, pad_mode=self.pad_mode)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=2, padding=1, output_padding=1, dtype=np.float32):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        self.w = _init_weight(rng, (in_ch, out_ch, kernel, kernel), dtype)
        self.b = _init_bias(out_ch, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(
            x, self.w, self.b, stride=self.stride, padding=self.padding, output_padding=self.output_padding
        )


class InstanceNorm2d(Module):
    """Parameter-free instance normalization (the CycleGAN convention)."""

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.instance_norm(x, eps=self.eps)
