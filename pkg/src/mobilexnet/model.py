"""MobileXNet family: two stacked encoder-decoder subnetworks.

Layout for a variant whose first encoder downsamples ``k`` times::

    encoder1   MobileNet-v1 prefix (conv + depthwise-separable blocks) -> F1 @ 1/2^k
    bridge1    three 3x3 convs, dilations ``bridge_dilations``
    decoder1   2 upsample blocks (+ encoder1 skips)                     -> F2 @ 1/2^(k-2)
    encoder2   E5 [s2, s1], E6 [s2, s1], E7 [s1] regular convs          -> @ 1/2^k
    bridge2    as bridge1
    decoder2   k upsample blocks; skips from E5, F2, then encoder1 taps
    head       3x3 conv -> 1 channel

Inputs are zero-padded on the bottom/right to a multiple of ``2^k`` and the
prediction is cropped back, so any input size maps to the same output size.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .layers import (BatchNorm2d, Conv2d, ConvBNReLU, ConvSpec, CostEntry,
                     DepthwiseSeparable, Module, Sequential, ShapeProbe,
                     UpsampleBlock, add_skip)
from .tensor import Tensor, getitem, pad2d

# MobileNet v1 depthwise-separable plan: (stage index into widths, stride)
MOBILENET_PLAN = [(1, 1), (2, 2), (2, 1), (3, 2), (3, 1), (4, 2),
                  (4, 1), (4, 1), (4, 1), (4, 1), (4, 1), (5, 2), (5, 1)]
# number of depthwise blocks used by each variant, and its downsampling count
VARIANTS = {"small": (5, 3), "base": (8, 4), "large": (13, 5)}
DEFAULT_WIDTHS = (32, 64, 128, 256, 512, 1024)


def stage_widths(first: int) -> Tuple[int, ...]:
    return tuple(first * 2 ** i for i in range(6))


@dataclass
class ArchitectureConfig:
    variant: str = "base"
    input_shape: Tuple[int, int, int] = (228, 304, 3)
    bridge_dilations: Tuple[int, ...] = (1, 2, 3)
    backbone_width: Tuple[int, ...] = DEFAULT_WIDTHS

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.bridge_dilations = tuple(int(r) for r in self.bridge_dilations)
        self.backbone_width = tuple(int(v) for v in self.backbone_width)
        if len(self.input_shape) != 3 or self.input_shape[2] != 3:
            raise ValueError(f"input_shape must be (H, W, 3), got {self.input_shape}")
        if len(self.bridge_dilations) != 3 or min(self.bridge_dilations) < 1:
            raise ValueError("bridge_dilations must be three positive ints")
        if len(self.backbone_width) != 6:
            raise ValueError("backbone_width needs six stage widths")
        wd = self.backbone_width
        if any(b != 2 * a for a, b in zip(wd, wd[1:])):
            # skips land on equal-channel tensors only when every stage doubles
            raise ValueError(f"backbone_width must double per stage, got {wd}")

    @property
    def downsamplings(self) -> int:
        return VARIANTS[self.variant][1]

    @property
    def multiple(self) -> int:
        return 2 ** self.downsamplings

    def padded_hw(self, h: Optional[int] = None, w: Optional[int] = None) -> Tuple[int, int]:
        h = self.input_shape[0] if h is None else h
        w = self.input_shape[1] if w is None else w
        m = self.multiple
        return -(-h // m) * m, -(-w // m) * m

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


@dataclass
class CostReport:
    parameters: int
    macs: int
    breakdown: List[CostEntry] = field(default_factory=list)

    def rows(self):
        return [(e.name, e.kind, e.params, e.macs) for e in self.breakdown]


class MobileXNet(Module):
    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config
        n_dw, k = VARIANTS[config.variant]
        widths = config.backbone_width
        dil = config.bridge_dilations

        # encoder1 and the scale (as power of two) of each block output
        blocks = [ConvBNReLU(ConvSpec(3, widths[0], 3, stride=2))]
        scales = [1]
        ch = widths[0]
        for stage, stride in MOBILENET_PLAN[:n_dw]:
            blocks.append(DepthwiseSeparable(ch, widths[stage], stride))
            ch = widths[stage]
            scales.append(scales[-1] + (stride == 2))
        self.encoder1 = Sequential(*blocks)
        # last block at each scale is tapped for skips
        self._taps = {s: i for i, s in enumerate(scales)}
        c1 = ch

        self.bridge1 = Sequential(*[ConvBNReLU(ConvSpec(c1, c1, 3, dilation=r)) for r in dil])
        self.decoder1 = Sequential(UpsampleBlock(c1), UpsampleBlock(c1 // 2))
        f2 = c1 // 4

        self.encoder2 = Sequential(
            Sequential(ConvBNReLU(ConvSpec(f2, 2 * f2, 3, stride=2)),
                       ConvBNReLU(ConvSpec(2 * f2, 2 * f2, 3))),
            Sequential(ConvBNReLU(ConvSpec(2 * f2, 4 * f2, 3, stride=2)),
                       ConvBNReLU(ConvSpec(4 * f2, 4 * f2, 3))),
            ConvBNReLU(ConvSpec(4 * f2, 4 * f2, 3)),
        )
        c2 = 4 * f2
        self.bridge2 = Sequential(*[ConvBNReLU(ConvSpec(c2, c2, 3, dilation=r)) for r in dil])
        ups = []
        c = c2
        for _ in range(k):
            ups.append(UpsampleBlock(c))
            c //= 2
        self.decoder2 = Sequential(*ups)
        # the only conv with a bias: nothing normalises after it
        self.head = Conv2d(ConvSpec(c, 1, 3), bias=True)
        self.assign_names()
        self._check_shapes()

    # -- forward ------------------------------------------------------------------
    def forward(self, x, return_features: bool = False):
        k = self.config.downsamplings
        h, w = x.shape[-2:]
        ph, pw = self.config.padded_hw(h, w)
        x = _pad(x, ph - h, pw - w)

        taps = {}
        for i, block in enumerate(self.encoder1):
            x = block(x)
            taps[i] = x
        skip1 = {s: taps[i] for s, i in self._taps.items()}
        f1 = x

        y = self.bridge1(f1)
        y = self.decoder1[0](y, skip1[k - 1])
        f2 = self.decoder1[1](y, skip1[k - 2])

        e5 = self.encoder2[0](f2)
        e7 = self.encoder2[2](self.encoder2[1](e5))
        y = self.bridge2(e7)

        skips2 = [e5, f2] + [skip1[s] for s in range(k - 3, 0, -1)] + [None]
        for block, skip in zip(self.decoder2, skips2):
            y = block(y, skip)
        out = self.head(y)
        out = _crop(out, h, w)
        if return_features:
            return out, {"F1": f1, "F2": f2, "E7": e7}
        return out

    def _check_shapes(self):
        h, w, _ = self.config.input_shape
        self(ShapeProbe((1, 3, h, w)))

    def learnable(self) -> List[Tuple[str, Tensor]]:
        return list(self.named_parameters())


def _pad(x, bottom, right):
    if isinstance(x, ShapeProbe):
        b, c, h, w = x.shape
        return x.derive((b, c, h + bottom, w + right))
    return pad2d(x, bottom, right)


def _crop(x, h, w):
    if isinstance(x, ShapeProbe):
        return x.derive(x.shape[:2] + (h, w))
    if x.shape[-2:] == (h, w):
        return x
    return getitem(x, (slice(None), slice(None), slice(0, h), slice(0, w)))


# -- public operations ---------------------------------------------------------------

def build(config: ArchitectureConfig) -> MobileXNet:
    return MobileXNet(config)


def count(model: Module, input_shape: Sequence[int]) -> CostReport:
    """Exact parameter and MAC totals for a forward pass at ``input_shape``.

    ``input_shape`` is (H, W) or (H, W, C). MACs follow the convention that
    one multiply-accumulate is one weight tap applied at one output position.
    """
    h, w = input_shape[:2]
    c = input_shape[2] if len(input_shape) > 2 else 3
    model.assign_names()
    probe = ShapeProbe((1, c, h, w))
    model(probe)
    entries = probe.entries
    return CostReport(sum(e.params for e in entries), sum(e.macs for e in entries), entries)


def mac_ratio(m: int, n: int, kernel: int = 3, hw: Tuple[int, int] = (8, 8)) -> Fraction:
    """Depthwise-separable over regular conv MAC ratio, measured with ``count``."""
    ds = DepthwiseSeparable(m, n)
    reg = ConvBNReLU(ConvSpec(m, n, kernel))
    shape = tuple(hw) + (m,)
    return Fraction(count(ds, shape).macs, count(reg, shape).macs)


def init_weights(model: Module, seed: int) -> None:
    """He-normal conv weights (std sqrt(2/fan_in)), BN gamma=1/beta=0, zero biases."""
    rng = np.random.default_rng(seed)
    for _, m in model.named_modules():
        if isinstance(m, Conv2d):
            std = np.sqrt(2.0 / m.fan_in)
            m.weight.data[...] = rng.normal(0.0, std, m.weight.shape).astype(np.float32)
            if m.bias is not None:
                m.bias.data[...] = 0
        elif isinstance(m, BatchNorm2d):
            m.gamma.data[...] = 1
            m.beta.data[...] = 0
            m.running_mean[...] = 0
            m.running_var[...] = 1


def encoder1_state(model: MobileXNet) -> Dict[str, np.ndarray]:
    return {n: a for n, a in model.state_dict().items() if n.startswith("encoder1.")}


def load_pretrained_backbone(model: MobileXNet, tensors: Dict[str, np.ndarray]) -> None:
    """Replace encoder1 weights only; every other layer keeps its values."""
    from .tensor import ShapeError

    own = encoder1_state(model)
    for name, arr in own.items():
        if name not in tensors:
            raise KeyError(f"pretrained checkpoint is missing tensor {name!r}")
        src = np.asarray(tensors[name])
        if src.shape != arr.shape:
            raise ShapeError(f"tensor {name!r}", src.shape, arr.shape)
    for name, arr in own.items():
        arr[...] = np.asarray(tensors[name], dtype=arr.dtype)
