"""Central-difference gradient checking and the per-op check suite."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

OP_TOLERANCE = 1e-4
GENERATOR_TOLERANCE = 1e-3


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` recomputes a scalar from the current values of ``inputs``; it must
    build its graph under float64 precision (the caller's responsibility,
    usually via ``T.precision(np.float64)``). When ``max_entries`` is set,
    that many randomly chosen entries per input are probed instead of all.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        for t in inputs:
            t.data = np.ascontiguousarray(t.data, dtype=np.float64)
            t.grad = None
            t.requires_grad = True
        loss = fn()
        T.backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        worst = 0.0
        with T.no_grad():
            for t, ga in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = rng.choice(flat.size, size=max_entries, replace=False)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = fn().item()
                    flat[i] = orig - eps
                    down = fn().item()
                    flat[i] = orig
                    num = (up - down) / (2 * eps)
                    a = ga.reshape(-1)[i]
                    err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                    worst = max(worst, err)
    return worst


def _away_from_kink(rng: np.random.Generator, shape, margin: float = 0.05, scale: float = 1.0) -> np.ndarray:
    x = rng.uniform(margin, scale, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


@dataclass
class CheckResult:
    op: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _check_conv(rng, stride: int = 1, padding: int = 1) -> float:
    x = Tensor(rng.normal(size=(2, 3, 5, 6)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=(4,)))
    probe = rng.normal(size=T.conv2d(x, w, b, stride, padding).shape)
    return grad_check(lambda: _weighted_sum(T.conv2d(x, w, b, stride, padding), probe), [x, w, b])


def _check_conv_transpose(rng, stride: int = 1, padding: int = 1) -> float:
    x = Tensor(rng.normal(size=(2, 3, 4, 5)))
    w = Tensor(rng.normal(size=(3, 4, 3, 3)))
    b = Tensor(rng.normal(size=(4,)))
    probe = rng.normal(size=T.conv_transpose2d(x, w, b, stride, padding).shape)
    return grad_check(lambda: _weighted_sum(T.conv_transpose2d(x, w, b, stride, padding), probe), [x, w, b])


def _check_batchnorm(rng, training: bool = True) -> float:
    x = Tensor(rng.normal(size=(3, 2, 3, 4)))
    g = Tensor(rng.uniform(0.5, 1.5, size=2))
    bt = Tensor(rng.normal(size=2))
    rm, rv = np.zeros(2), np.ones(2)
    probe = rng.normal(size=x.shape)
    return grad_check(lambda: _weighted_sum(T.batchnorm2d(x, g, bt, rm, rv, training=training), probe), [x, g, bt])


def _check_prelu(rng, channels: int = 1) -> float:
    x = Tensor(_away_from_kink(rng, (2, 3, 4, 4)))
    lam = Tensor(rng.uniform(0.1, 0.4, size=channels))
    probe = rng.normal(size=x.shape)
    return grad_check(lambda: _weighted_sum(T.prelu(x, lam), probe), [x, lam])


def _check_activation(rng, kind: str) -> float:
    x = Tensor(_away_from_kink(rng, (2, 3, 4, 4), scale=3.0))
    probe = rng.normal(size=x.shape)
    return grad_check(lambda: _weighted_sum(T.activation(kind, x), probe), [x])


def _check_add(rng) -> float:
    a, b = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 3, 4)))
    probe = rng.normal(size=a.shape)
    return grad_check(lambda: _weighted_sum(T.add(a, b), probe), [a, b])


def _check_concat(rng) -> float:
    a, b = Tensor(rng.normal(size=(2, 1, 3, 3))), Tensor(rng.normal(size=(2, 2, 3, 3)))
    probe = rng.normal(size=(2, 3, 3, 3))
    return grad_check(lambda: _weighted_sum(T.channel_concat(a, b), probe), [a, b])


def _check_pool(rng) -> float:
    x = Tensor(rng.normal(size=(2, 3, 5, 6)))
    probe = rng.normal(size=(2, 3, 2, 3))
    return grad_check(lambda: _weighted_sum(T.avg_pool2d(x, 2), probe), [x])


def _check_l2(rng) -> float:
    from .losses import l2_loss

    # probe a small residual: difference roundoff scales with the loss value,
    # and near-zero gradient entries would otherwise measure float64 noise
    y = Tensor(rng.uniform(-1, 1, size=(2, 3, 16, 16)))
    o = Tensor(y.data - _away_from_kink(rng, y.shape, margin=0.02, scale=0.1))
    return grad_check(lambda: l2_loss(y, o), [y, o])


def _check_smooth_l1(rng) -> float:
    from .losses import smooth_l1_loss

    y = Tensor(rng.uniform(-1, 1, size=(2, 3, 16, 16)))
    d = _away_from_kink(rng, y.shape, margin=0.05, scale=2.5)
    # keep |d| off the branch switch at 1 by at least 0.05
    d = np.where(np.abs(np.abs(d) - 1) < 0.05, d * 0.8, d)
    o = Tensor(y.data - d)
    return grad_check(lambda: smooth_l1_loss(y, o), [y, o])


def _check_feature(rng) -> float:
    from .losses import feature_loss
    from .models import FeatureNet

    with T.precision(np.float64):
        net = FeatureNet()
    y = Tensor(rng.uniform(-1, 1, size=(1, 3, 16, 16)))
    o = Tensor(y.data + 0.1 * rng.normal(size=y.shape))
    return grad_check(lambda: feature_loss(net, y, o, 2), [o])


def _check_adv_d(rng) -> float:
    from .losses import adversarial_d_loss

    r, f = Tensor(rng.uniform(0.05, 0.95, size=(4, 1, 2, 2))), Tensor(rng.uniform(0.05, 0.95, size=(4, 1, 2, 2)))
    return grad_check(lambda: adversarial_d_loss(r, f), [r, f])


def _check_adv_g(rng) -> float:
    from .losses import adversarial_g_loss

    f = Tensor(rng.uniform(0.05, 0.95, size=(4, 1, 2, 2)))
    return grad_check(lambda: adversarial_g_loss(f), [f])


def _check_generator(rng) -> float:
    from .models import Generator

    with T.precision(np.float64):
        g = Generator(seed=int(rng.integers(1 << 31)))
    x = Tensor(rng.uniform(-1, 1, size=(2, 3, 8, 8)))
    probe = rng.normal(size=x.shape)
    params = g.parameters()
    return grad_check(lambda: _weighted_sum(g(x), probe), [x, *params], max_entries=16, seed=2)


CHECKS: dict[str, tuple[Callable[[np.random.Generator], float], float]] = {
    "conv2d": (_check_conv, OP_TOLERANCE),
    "conv2d_stride2": (lambda r: _check_conv(r, stride=2, padding=1), OP_TOLERANCE),
    "conv_transpose2d": (_check_conv_transpose, OP_TOLERANCE),
    "conv_transpose2d_stride2": (lambda r: _check_conv_transpose(r, stride=2, padding=0), OP_TOLERANCE),
    "batchnorm2d": (_check_batchnorm, OP_TOLERANCE),
    "batchnorm2d_eval": (lambda r: _check_batchnorm(r, training=False), OP_TOLERANCE),
    "prelu": (_check_prelu, OP_TOLERANCE),
    "prelu_channel": (lambda r: _check_prelu(r, channels=3), OP_TOLERANCE),
    "relu": (lambda r: _check_activation(r, "relu"), OP_TOLERANCE),
    "leaky_relu": (lambda r: _check_activation(r, "leaky_relu"), OP_TOLERANCE),
    "tanh": (lambda r: _check_activation(r, "tanh"), OP_TOLERANCE),
    "sigmoid": (lambda r: _check_activation(r, "sigmoid"), OP_TOLERANCE),
    "add": (_check_add, OP_TOLERANCE),
    "channel_concat": (_check_concat, OP_TOLERANCE),
    "avg_pool2d": (_check_pool, OP_TOLERANCE),
    "l2_loss": (_check_l2, OP_TOLERANCE),
    "smooth_l1_loss": (_check_smooth_l1, OP_TOLERANCE),
    "feature_loss": (_check_feature, OP_TOLERANCE),
    "adversarial_d_loss": (_check_adv_d, OP_TOLERANCE),
    "adversarial_g_loss": (_check_adv_g, OP_TOLERANCE),
    "generator": (_check_generator, GENERATOR_TOLERANCE),
}


def run_suite(ops: Sequence[str] | None = None, seed: int = 0) -> list[CheckResult]:
    names = list(CHECKS) if ops is None else list(ops)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradcheck op {unknown[0]!r}; available: {', '.join(CHECKS)}")
    results = []
    for name in names:
        fn, tol = CHECKS[name]
        rng = np.random.default_rng([seed, list(CHECKS).index(name)])
        start = time.perf_counter()
        with T.precision(np.float64):
            err = fn(rng)
        results.append(CheckResult(name, float(err), tol, time.perf_counter() - start))
    return results
