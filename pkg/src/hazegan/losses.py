"""Training objectives for the generator and discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .models import FeatureNet
from .tensor import ShapeError, Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_adv: float = 1.0
    w_l2: float = 1.0
    w_s1: float = 1.0
    w_feat: float = 1.0
    tap: int = 2

    def __post_init__(self):
        ws = (self.w_adv, self.w_l2, self.w_s1, self.w_feat)
        if any(w < 0 for w in ws):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")

    @property
    def adversarial(self) -> bool:
        return self.w_adv > 0

    def scaled(self, **factors: float) -> "LossWeights":
        return replace(self, **{k: getattr(self, k) * f for k, f in factors.items()})

    def to_dict(self) -> dict:
        return asdict(self)


# tap 2 stands in for the relu2_2 layer, tap 4 for relu4_3
PRESETS: dict[str, LossWeights] = {
    "GEN": LossWeights(w_adv=0.0, w_l2=1.0, w_s1=0.0, w_feat=1.0, tap=2),
    "CANDY-L1-9P": LossWeights(w_adv=1.0, w_l2=0.0, w_s1=1.0, w_feat=1.0, tap=2),
    "CANDY-L2-9P": LossWeights(w_adv=1.0, w_l2=1.0, w_s1=0.0, w_feat=1.0, tap=2),
    "CANDY-L1-23P": LossWeights(w_adv=1.0, w_l2=0.0, w_s1=1.0, w_feat=1.0, tap=4),
    "CANDY-L2-23P": LossWeights(w_adv=1.0, w_l2=1.0, w_s1=0.0, w_feat=1.0, tap=4),
}


def preset(name: str) -> LossWeights:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(PRESETS)}") from None


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: target {a.shape} and output {b.shape} differ")


def l2_loss(target: Tensor, output: Tensor) -> Tensor:
    """Mean squared difference."""
    _same_shape(target, output, "l2_loss")
    return (target - output).square().mean()


def smooth_l1_loss(target: Tensor, output: Tensor) -> Tensor:
    """Mean of 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise, with d = target - output."""
    _same_shape(target, output, "smooth_l1_loss")
    d = target.data - output.data
    a = np.abs(d)
    quad = a < 1
    vals = np.where(quad, 0.5 * d * d, a - 0.5)
    n = d.size
    # d/d(output) of the elementwise term is -clip(d, -1, 1)
    slope = -np.clip(d, -1.0, 1.0)

    def grads(g):
        go = g.reshape(()) * slope / n
        return -go, go

    return T._result(np.mean(vals, dtype=np.float64).reshape(1), "smooth_l1", (target, output), grads)


def feature_loss(net: FeatureNet, target: Tensor, output: Tensor, tap: int) -> Tensor:
    """Mean squared difference between frozen-network activations at ``tap``."""
    _same_shape(target, output, "feature_loss")
    with T.no_grad():
        ft = net(target, tap)
    return l2_loss(ft, net(output, tap))


def _neg_mean_log(p: Tensor) -> Tensor:
    return -T.log(T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)).mean()


def adversarial_d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-mean log D(real) - mean log(1 - D(fake))."""
    return _neg_mean_log(d_real) + _neg_mean_log(1.0 - d_fake)


def adversarial_g_loss(d_fake: Tensor) -> Tensor:
    """Non-saturating generator term, -mean log D(fake)."""
    return _neg_mean_log(d_fake)


@dataclass
class LossReport:
    total: Tensor
    terms: dict[str, float]


def combined_loss(weights: LossWeights, components: dict[str, Tensor]) -> LossReport:
    """Weighted sum of the available terms.

    ``components`` maps any of ``adv``, ``l2``, ``s1``, ``feat`` to scalar
    tensors. Terms with zero weight may be omitted.
    """
    wmap = {"adv": weights.w_adv, "l2": weights.w_l2, "s1": weights.w_s1, "feat": weights.w_feat}
    total = None
    terms: dict[str, float] = {}
    for key, w in wmap.items():
        comp = components.get(key)
        if comp is None:
            if w > 0:
                raise KeyError(f"loss term {key!r} has weight {w} but was not computed")
            continue
        terms[key] = comp.item()
        if w == 0:
            continue
        part = comp * w
        total = part if total is None else total + part
    if total is None:
        raise ValueError("no weighted loss terms present")
    terms["total"] = total.item()
    return LossReport(total, terms)
