""" Parameter containers: a minimal Module base and a 2-D convolution layer. """
from __future__ import annotations

import logging
import typing

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Module(object):
    """ Base class for anything owning parameters.

    Parameters are Tensor attributes with requires_grad set; sub-modules
    are Module attributes or lists of Modules. Names are dotted paths in
    attribute order, which makes them stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> typing.Iterator[tuple[str, Tensor]]:
        for k, v in vars(self).items():
            if k.startswith("_"):
                continue
            name = f"{prefix}{k}"
            if isinstance(v, Tensor) and v.requires_grad:
                yield name, v
            elif isinstance(v, Module):
                yield from v.named_parameters(f"{name}.")
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> typing.Iterator[tuple[str, Tensor]]:
        """ Frozen tensors that still belong in a checkpoint. """
        for k, v in vars(self).items():
            if k.startswith("_"):
                continue
            name = f"{prefix}{k}"
            if isinstance(v, Tensor) and not v.requires_grad:
                yield name, v
            elif isinstance(v, Module):
                yield from v.named_buffers(f"{name}.")
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """ Convolution with Kaiming-uniform weights and zero bias.

    Parameters
    ----------
    in_channels : int
    out_channels : int
    kernel_size : int
        odd
    stride : int
    rng : numpy.random.Generator
        source of the initial weights
    """
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel_size // 2
        dtype = get_default_dtype()
        self.weight = Tensor(kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


logger = logging.getLogger(__name__)
