"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Module


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def _index_range(bad: np.ndarray) -> str:
    idx = np.flatnonzero(bad)
    return f"[{idx[0]}..{idx[-1]}] ({idx.size} entries)"


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState,
              names: list[str] | None = None) -> None:
    """Update ``params`` in place. Entries whose gradient is None are left alone.

    Every gradient is checked before anything is modified, so a non-finite
    gradient aborts the whole step.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        bad = ~np.isfinite(g)
        if bad.any():
            label = names[i] if names else f"#{i}"
            raise NonFiniteGradientError(f"non-finite gradient for {label} at flat indices {_index_range(bad)}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


class Adam:
    """Adam over a module's trainable parameters."""

    def __init__(self, module: Module, lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.names)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.state.m = [np.array(arrays[f"m.{n}"], dtype=p.dtype) for n, p in zip(self.names, self.params)]
        self.state.v = [np.array(arrays[f"v.{n}"], dtype=p.dtype) for n, p in zip(self.names, self.params)]
        self.state.t = t
