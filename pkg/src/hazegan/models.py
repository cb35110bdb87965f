"""Generator, discriminator and the fixed feature network."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module, PReLU
from .tensor import ShapeError, Tensor

WIDTH = 64
INIT_STD = 0.02
PRELU_INIT = 0.25
# encoder layer k feeds the input of decoder layer 7 - k
SKIP_PAIRS = {2: 5, 4: 3, 6: 1}
DISC_WIDTHS = (48, 48, 96, 96, 192, 192, 1)
FEATURE_WIDTHS = (64, 128, 256, 512)
FEATURE_SEED = 0x5EED


class Generator(Module):
    """Six stride-1 conv blocks mirrored by six transposed-conv blocks, Tanh output.

    Encoder block k: conv -> [batchnorm, k > 1] -> PReLU.
    Decoder block k < 6: deconv -> ReLU -> batchnorm. Decoder block 6 maps
    64 channels to 3 and feeds Tanh directly. Encoder outputs 2, 4, 6 are
    added to the inputs of decoders 5, 3, 1.
    """

    def __init__(self, seed: int = 0, width: int = WIDTH, prelu_channels: int = 1,
                 skips: dict[int, int] | None = None):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.skips = dict(SKIP_PAIRS if skips is None else skips)
        self.enc = []
        for k in range(1, 7):
            block = self.add_child(f"conv{k}", Module())
            in_ch = 3 if k == 1 else width
            # batchnorm cancels any bias, so only the first conv carries one
            block.add_child("conv", Conv2d(in_ch, width, rng, bias=(k == 1), std=INIT_STD))
            if k > 1:
                block.add_child("bn", BatchNorm2d(width))
            block.add_child("act", PReLU(prelu_channels if prelu_channels == 1 else width, PRELU_INIT))
            self.enc.append(block)
        self.dec = []
        for k in range(1, 7):
            block = self.add_child(f"deconv{k}", Module())
            out_ch = 3 if k == 6 else width
            block.add_child("deconv", ConvTranspose2d(width, out_ch, rng, std=INIT_STD))
            if k < 6:
                block.add_child("bn", BatchNorm2d(width))
            self.dec.append(block)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"generator expects (N,3,H,W) input, got {x.shape}", ("C",))
        if min(x.shape[2:]) < 4:
            raise ShapeError(f"generator needs H, W >= 4, got {x.shape[2:]}", ("H", "W"))
        feats: dict[int, Tensor] = {}
        h = x
        for k, block in enumerate(self.enc, start=1):
            h = block.conv(h)
            if hasattr(block, "bn"):
                h = block.bn(h)
            h = block.act(h)
            feats[k] = h
        into = {dst: src for src, dst in self.skips.items()}
        for k, block in enumerate(self.dec, start=1):
            if k in into:
                h = T.add(h, feats[into[k]])
            h = block.deconv(h)
            if k < 6:
                h = T.relu(h)
                h = block.bn(h)
        return T.tanh(h)


def generator_param_count(width: int = WIDTH, prelu_channels: int = 1) -> int:
    """Closed-form parameter count of :class:`Generator` (buffers excluded)."""
    k2 = 9
    first = 3 * width * k2 + width
    inner_conv = width * width * k2
    bn = 2 * width
    total = first + prelu_channels
    total += 5 * (inner_conv + bn + prelu_channels)
    total += 5 * (inner_conv + width + bn)
    total += width * 3 * k2 + 3
    return total


class Discriminator(Module):
    """Seven 3x3 stride-2 convs over a (hazy, candidate) pair; per-patch sigmoid map."""

    def __init__(self, seed: int = 1, widths: tuple[int, ...] = DISC_WIDTHS, in_ch: int = 6, slope: float = 0.2):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.slope = slope
        self.in_ch = in_ch
        self.layers = []
        prev = in_ch
        last = len(widths)
        for k, w in enumerate(widths, start=1):
            block = self.add_child(f"conv{k}", Module())
            has_bn = 1 < k < last
            block.add_child("conv", Conv2d(prev, w, rng, stride=2, padding=1, bias=not has_bn, std=INIT_STD))
            if has_bn:
                block.add_child("bn", BatchNorm2d(w))
            self.layers.append(block)
            prev = w

    def logits(self, pair: Tensor) -> Tensor:
        if pair.ndim != 4 or pair.shape[1] != self.in_ch:
            raise ShapeError(f"discriminator expects (N,{self.in_ch},H,W) input, got {pair.shape}", ("C",))
        h = pair
        last = len(self.layers)
        for k, block in enumerate(self.layers, start=1):
            h = block.conv(h)
            if hasattr(block, "bn"):
                h = block.bn(h)
            if k < last:
                h = T.leaky_relu(h, self.slope)
        return h

    def forward(self, pair: Tensor) -> Tensor:
        """Probability map (N, 1, h, w) with every value in (0, 1)."""
        return T.sigmoid(self.logits(pair))

    def score(self, hazy: Tensor, candidate: Tensor) -> tuple[Tensor, float]:
        probs = self(T.channel_concat(hazy, candidate))
        return probs, float(probs.data.mean())


def discriminator_map_size(size: int, layers: int = len(DISC_WIDTHS)) -> int:
    for _ in range(layers):
        size = T.conv_output_size(size, 3, 2, 1)
    return size


class FeatureNet(Module):
    """Frozen conv -> ReLU -> 2x2 average-pool stack; tap i is the output of block i."""

    def __init__(self, seed: int = FEATURE_SEED, widths: tuple[int, ...] = FEATURE_WIDTHS, in_ch: int = 3):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        prev = in_ch
        for k, w in enumerate(self.widths, start=1):
            # He scaling keeps random-feature activations from collapsing with depth
            conv = Conv2d(prev, w, rng, std=float(np.sqrt(2.0 / (prev * 9))))
            for p in conv.parameters():
                p.requires_grad = False
            self.add_child(f"block{k}", conv)
            prev = w

    @property
    def depth(self) -> int:
        return len(self.widths)

    def forward(self, image: Tensor, tap: int) -> Tensor:
        if not 1 <= tap <= self.depth:
            raise ValueError(f"feature tap must be in 1..{self.depth}, got {tap}")
        h = image
        for k in range(1, tap + 1):
            h = T.avg_pool2d(T.relu(getattr(self, f"block{k}")(h)), 2)
        return h

    def train(self, mode: bool = True) -> "FeatureNet":
        # no batch statistics here; mode is irrelevant and weights never train
        return self
