"""Parameter containers and layers built on the tensor engine."""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameters (Tensors), buffers (raw arrays) and child modules."""

    def __init__(self) -> None:
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self._children: OrderedDict[str, Module] = OrderedDict()
        self.training = True

    def add_param(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(value, requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.array(value, dtype=T.get_dtype())
        self._buffers[name] = arr
        return arr

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into this module. Shapes are checked before anything is written."""
        from .checkpoint import CheckpointMismatchError

        targets: dict[str, np.ndarray] = {n: p.data for n, p in self.named_parameters()}
        targets.update(self.named_buffers())
        for name, arr in targets.items():
            if name in state and tuple(state[name].shape) != arr.shape:
                raise CheckpointMismatchError(
                    f"shape mismatch for tensor {name!r}: checkpoint has {tuple(state[name].shape)}, "
                    f"model expects {arr.shape}",
                    name,
                )
        missing = [n for n in targets if n not in state]
        if missing:
            raise CheckpointMismatchError(f"checkpoint is missing tensor {missing[0]!r}", missing[0])
        unknown = [n for n in state if n not in targets]
        if unknown:
            raise CheckpointMismatchError(f"checkpoint has unknown tensor {unknown[0]!r}", unknown[0])
        for name, arr in targets.items():
            arr[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __getattr__(self, name: str):
        children = self.__dict__.get("_children")
        if children is not None and name in children:
            return children[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, padding: int = 1, bias: bool = True, std: float = 0.02):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = self.add_param("weight", _normal(rng, (out_ch, in_ch, kernel, kernel), std))
        self.bias = self.add_param("bias", np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, padding: int = 1, bias: bool = True, std: float = 0.02):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = self.add_param("weight", _normal(rng, (in_ch, out_ch, kernel, kernel), std))
        self.bias = self.add_param("bias", np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        # set False to run with batch statistics without touching the running averages
        self.update_stats = True
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
            update_stats=self.update_stats,
        )


class PReLU(Module):
    def __init__(self, channels: int = 1, init: float = 0.25):
        super().__init__()
        self.leak = self.add_param("leak", np.full(channels, init))

    def forward(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.leak)


@contextlib.contextmanager
def frozen_stats(module: Module) -> Iterator[None]:
    """Keep batch-norm running statistics untouched for the duration."""
    bns = [m for m in module.modules() if isinstance(m, BatchNorm2d)]
    prev = [bn.update_stats for bn in bns]
    for bn in bns:
        bn.update_stats = False
    try:
        yield
    finally:
        for bn, p in zip(bns, prev):
            bn.update_stats = p


@contextlib.contextmanager
def frozen_params(module: Module) -> Iterator[None]:
    """Stop gradients from reaching this module's parameters for the duration."""
    params = module.parameters()
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, r in zip(params, prev):
            p.requires_grad = r
