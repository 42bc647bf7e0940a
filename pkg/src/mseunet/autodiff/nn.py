"""Parameter containers: a thin ``Module`` that discovers parameters by attribute walk."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


def parameter(data) -> Tensor:
    """Leaf tensor that takes part in training.

    Values are rounded through float32 so that a float32 checkpoint
    round-trips them exactly, whatever the working precision.
    """
    arr = np.asarray(data, dtype=np.float32).astype(get_default_dtype())
    return Tensor(arr, requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """``y = x @ weight + bias``; weight stored (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(uniform_init(rng, (n_in, n_out), n_in))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def flops(self, n_rows: int) -> int:
        n_in, n_out = self.weight.shape
        return 2 * n_rows * n_in * n_out


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1, dilation=1,
                 padding=0, groups: int = 1, bias: bool = True):
        kh, kw = ops._pair(kernel)
        fan_in = c_in // groups * kh * kw
        self.weight = parameter(uniform_init(rng, (c_out, c_in // groups, kh, kw), fan_in))
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride, self.dilation, self.padding, self.groups = stride, dilation, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding, self.groups)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        (pt, pb), (pl, pr) = ops._norm_padding(self.padding)
        sh, sw = ops._pair(self.stride)
        dh, dw = ops._pair(self.dilation)
        _, _, kh, kw = self.weight.shape
        return (h + pt + pb - dh * (kh - 1) - 1) // sh + 1, (w + pl + pr - dw * (kw - 1) - 1) // sw + 1

    def flops(self, h: int, w: int) -> int:
        ho, wo = self.out_hw(h, w)
        c_out, cig, kh, kw = self.weight.shape
        return 2 * kh * kw * cig * c_out * ho * wo


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1, padding=0, bias: bool = True):
        kh, kw = ops._pair(kernel)
        self.weight = parameter(uniform_init(rng, (c_in, c_out, kh, kw), c_in * kh * kw))
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        sh, sw = ops._pair(self.stride)
        ph, pw = ops._pair(self.padding)
        _, _, kh, kw = self.weight.shape
        return (h - 1) * sh - 2 * ph + kh, (w - 1) * sw - 2 * pw + kw

    def flops(self, h: int, w: int) -> int:
        c_in, c_out, kh, kw = self.weight.shape
        return 2 * kh * kw * c_in * c_out * h * w
