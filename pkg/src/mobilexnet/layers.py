"""Convolution, batch-norm and bilinear upsampling layers.

Functional ops (``conv2d``, ``batchnorm``, ``upsample_bilinear``) operate on
:class:`Tensor` and record their own backward. The ``Module`` classes wrap
them with parameters and can also be called on a :class:`ShapeProbe`, which
walks the network without computing anything and collects per-layer cost.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, _make, add, relu


# -- conv spec ------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    depthwise: bool = False
    padding: Optional[int] = None  # None -> "same" padding for the dilated extent

    def __post_init__(self):
        for f in ("in_channels", "out_channels", "kernel", "stride", "dilation"):
            if getattr(self, f) < 1:
                raise ValueError(f"ConvSpec.{f} must be positive, got {getattr(self, f)}")
        if self.depthwise and self.in_channels != self.out_channels:
            raise ValueError("depthwise conv requires out_channels == in_channels")
        if self.padding is not None and self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def extent(self) -> int:
        return self.dilation * (self.kernel - 1) + 1

    @property
    def pad(self) -> int:
        return self.extent // 2 if self.padding is None else self.padding

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        m = 1 if self.depthwise else self.in_channels
        return (self.out_channels, m, self.kernel, self.kernel)

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        p = self.pad
        if self.extent > h + 2 * p or self.extent > w + 2 * p:
            raise ValueError(
                f"effective kernel {self.extent} exceeds padded input {h + 2 * p}x{w + 2 * p}")
        return ((h + 2 * p - self.extent) // self.stride + 1,
                (w + 2 * p - self.extent) // self.stride + 1)


def _window(xp, i, j, spec, ho, wo):
    d, s = spec.dilation, spec.stride
    return xp[:, :, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s]


def conv2d(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Zero-padded cross-correlation, optionally depthwise and/or dilated."""
    if x.ndim != 4:
        raise ShapeError("conv2d", x.shape, ("B", spec.in_channels, "H", "W"))
    if w.shape != spec.weight_shape:
        raise ShapeError("conv2d weight", w.shape, spec.weight_shape)
    b, m, h, wd = x.shape
    if m != spec.in_channels:
        raise ShapeError("conv2d channels", x.shape, spec.weight_shape)
    ho, wo = spec.output_hw(h, wd)
    p, k = spec.pad, spec.kernel
    n = spec.out_channels
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wt = w.data
    out = np.zeros((b, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            xs = _window(xp, i, j, spec, ho, wo)
            if spec.depthwise:
                out += wt[:, 0, i, j][None, :, None, None] * xs
            else:
                out += (wt[:, :, i, j] @ xs.reshape(b, m, ho * wo)).reshape(b, n, ho, wo)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wt)
        g2 = g.reshape(b, n, ho * wo)
        for i in range(k):
            for j in range(k):
                xs = _window(xp, i, j, spec, ho, wo)
                gs = _window(gxp, i, j, spec, ho, wo)
                if spec.depthwise:
                    gw[:, 0, i, j] = np.sum(g * xs, axis=(0, 2, 3), dtype=np.float64)
                    gs += wt[:, 0, i, j][None, :, None, None] * g
                else:
                    xs2 = xs.reshape(b, m, ho * wo)
                    gw[:, :, i, j] = np.sum(g2 @ xs2.transpose(0, 2, 1), axis=0, dtype=np.float64)
                    gs += (wt[:, :, i, j].T @ g2).reshape(b, m, ho, wo)
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw

    return _make(out, (x, w), grad_fn, "conv2d")


def depthwise_separable(x: Tensor, dw_weights: Tensor, pw_weights: Tensor, spec: ConvSpec) -> Tensor:
    """Depthwise conv followed by a 1x1 pointwise conv (no normalisation)."""
    m, n = spec.in_channels, spec.out_channels
    if dw_weights.shape[0] != m or pw_weights.shape[1] != m:
        raise ShapeError("depthwise_separable", dw_weights.shape, pw_weights.shape)
    dw = ConvSpec(m, m, spec.kernel, spec.stride, spec.dilation, True, spec.padding)
    pw = ConvSpec(m, n, 1)
    return conv2d(conv2d(x, dw_weights, dw), pw_weights, pw)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    if bias.shape != (x.shape[1],):
        raise ShapeError("bias_add", x.shape, bias.shape)
    return _make(x.data + bias.data[None, :, None, None], (x, bias),
                 lambda g: (g, np.sum(g, axis=(0, 2, 3), dtype=np.float64)), "bias_add")


# -- batch norm -----------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (B, H, W).

    In training mode ``running_mean``/``running_var`` are updated in place.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm", x.shape, gamma.shape)
    dt = x.dtype
    shp = (1, c, 1, 1)
    gd, bd = gamma.data.reshape(shp), beta.data.reshape(shp)
    if not training:
        inv = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(dt).reshape(shp)
        rm = running_mean.astype(dt).reshape(shp)
        xhat = (x.data - rm) * inv
        out = gd * xhat + bd

        def grad_eval(g):
            return (g * gd * inv,
                    np.sum(g * xhat, axis=(0, 2, 3), dtype=np.float64),
                    np.sum(g, axis=(0, 2, 3), dtype=np.float64))

        return _make(out.astype(dt), (x, gamma, beta), grad_eval, "batchnorm_eval")

    n = x.size // c
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=(0, 2, 3))
    var = x64.var(axis=(0, 2, 3))
    inv64 = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mu.reshape(shp)) * inv64.reshape(shp)).astype(dt)
    out = gd * xhat + bd
    running_mean *= (1 - momentum)
    running_mean += (momentum * mu).astype(running_mean.dtype)
    unbiased = var * n / (n - 1) if n > 1 else var
    running_var *= (1 - momentum)
    running_var += (momentum * unbiased).astype(running_var.dtype)
    inv = inv64.astype(dt).reshape(shp)

    def grad_train(g):
        dxhat = g * gd
        s1 = np.sum(dxhat, axis=(0, 2, 3), dtype=np.float64).astype(dt).reshape(shp)
        s2 = np.sum(dxhat * xhat, axis=(0, 2, 3), dtype=np.float64).astype(dt).reshape(shp)
        gx = inv / n * (n * dxhat - s1 - xhat * s2)
        return (gx,
                np.sum(g * xhat, axis=(0, 2, 3), dtype=np.float64),
                np.sum(g, axis=(0, 2, 3), dtype=np.float64))

    return _make(out.astype(dt), (x, gamma, beta), grad_train, "batchnorm_train")


# -- bilinear upsampling ---------------------------------------------------------

def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic matrix for half-pixel bilinear resampling."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - lam)
    np.add.at(a, (rows, i1), lam)
    return a


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ValueError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    ah = interp_matrix(h, out_h).astype(x.dtype)
    aw = interp_matrix(w, out_w).astype(x.dtype)
    out = ah @ (x.data @ aw.T)
    return _make(out, (x,), lambda g: (ah.T @ (g @ aw),), "upsample_bilinear")


# -- module system ------------------------------------------------------------------

@dataclass
class CostEntry:
    name: str
    kind: str
    params: int
    macs: int


class ShapeProbe:
    """Stand-in for an activation tensor during cost/shape tracing."""

    def __init__(self, shape, entries: Optional[List[CostEntry]] = None):
        self.shape = tuple(shape)
        self.entries = [] if entries is None else entries

    def derive(self, shape) -> "ShapeProbe":
        return ShapeProbe(shape, self.entries)


def add_skip(a, b):
    """Additive skip fusion; shapes must already agree."""
    if isinstance(a, ShapeProbe):
        if a.shape != b.shape:
            raise ShapeError("skip", a.shape, b.shape)
        return a
    return add(a, b)


class Module:
    def __init__(self):
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "name", "")

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self._modules[key] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def __call__(self, *args, **kwargs):
        if args and isinstance(args[0], ShapeProbe):
            return self.probe(*args, **kwargs)
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def probe(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # traversal
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for k, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{k}" if prefix else k)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for mname, m in self.named_modules():
            for k, p in m._params.items():
                yield (f"{mname}.{k}" if mname else k), p

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for mname, m in self.named_modules():
            for k, b in m._buffers.items():
                yield (f"{mname}.{k}" if mname else k), b

    def assign_names(self) -> None:
        for n, m in self.named_modules():
            object.__setattr__(m, "name", n)

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Convert parameters and buffers in place (float64 for gradient checks)."""
        for _, m in self.named_modules():
            for k, p in m._params.items():
                p.data = p.data.astype(dtype)
                p.grad = None
            for k, b in list(m._buffers.items()):
                m.register_buffer(k, b.astype(dtype))
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for n, p in self.named_parameters():
            out[n] = p.data
        for n, b in self.named_buffers():
            out[n] = b
        return out

    def load_state_dict(self, tensors, strict: bool = True) -> None:
        """Copy arrays in place; raises KeyError/ShapeError naming the tensor."""
        own = self.state_dict()
        for n, arr in own.items():
            if n not in tensors:
                if strict:
                    raise KeyError(f"missing tensor {n!r}")
                continue
            src = np.asarray(tensors[n])
            if src.shape != arr.shape:
                raise ShapeError(f"tensor {n!r}", src.shape, arr.shape)
        if strict:
            extra = [n for n in tensors if n not in own]
            if extra:
                raise KeyError(f"unexpected tensor {extra[0]!r}")
        for n, arr in own.items():
            if n in tensors:
                arr[...] = np.asarray(tensors[n], dtype=arr.dtype)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, bias: bool = False):
        super().__init__()
        self.spec = spec
        self.weight = Tensor(np.zeros(spec.weight_shape, np.float32), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(spec.out_channels, np.float32), requires_grad=True)
        else:
            self.bias = None

    @property
    def fan_in(self) -> int:
        return self.spec.weight_shape[1] * self.spec.kernel ** 2

    def forward(self, x):
        y = conv2d(x, self.weight, self.spec)
        return bias_add(y, self.bias) if self.bias is not None else y

    def probe(self, x: ShapeProbe):
        b, c, h, w = x.shape
        if c != self.spec.in_channels:
            raise ShapeError(f"{self.name}", x.shape, self.spec.weight_shape)
        ho, wo = self.spec.output_hw(h, w)
        n_w = int(np.prod(self.spec.weight_shape))
        params = n_w + (self.spec.out_channels if self.bias is not None else 0)
        # one MAC per weight tap per output position
        macs = b * n_w * ho * wo
        kind = "conv_dw" if self.spec.depthwise else ("conv_pw" if self.spec.kernel == 1 else "conv")
        x.entries.append(CostEntry(self.name, kind, params, macs))
        return x.derive((b, self.spec.out_channels, ho, wo))


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))

    def forward(self, x):
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)

    def probe(self, x: ShapeProbe):
        x.entries.append(CostEntry(self.name, "bn", 2 * self.gamma.size, 0))
        return x


class ReLU(Module):
    def forward(self, x):
        return relu(x)

    def probe(self, x):
        return x


class ConvBNReLU(Sequential):
    def __init__(self, spec: ConvSpec):
        super().__init__(Conv2d(spec), BatchNorm2d(spec.out_channels), ReLU())
        self.spec = spec


class DepthwiseSeparable(Sequential):
    """DW -> BN -> ReLU -> PW -> BN -> ReLU (MobileNet v1 ordering)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1):
        super().__init__(
            Conv2d(ConvSpec(in_ch, in_ch, 3, stride, dilation, depthwise=True)),
            BatchNorm2d(in_ch), ReLU(),
            Conv2d(ConvSpec(in_ch, out_ch, 1)),
            BatchNorm2d(out_ch), ReLU(),
        )


class Upsample(Module):
    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        h, w = x.shape[-2:]
        return upsample_bilinear(x, h * self.factor, w * self.factor)

    def probe(self, x: ShapeProbe):
        b, c, h, w = x.shape
        return x.derive((b, c, h * self.factor, w * self.factor))


class UpsampleBlock(Module):
    """3x3 conv halving channels -> BN -> ReLU -> bilinear x2 -> (+ skip)."""

    def __init__(self, in_ch: int, out_ch: Optional[int] = None):
        super().__init__()
        out_ch = in_ch // 2 if out_ch is None else out_ch
        if out_ch < 1:
            raise ValueError(f"cannot halve {in_ch} channels")
        self.conv = ConvBNReLU(ConvSpec(in_ch, out_ch, 3))
        self.up = Upsample(2)
        self.out_channels = out_ch

    def forward(self, x, skip=None):
        y = self.up(self.conv(x))
        if skip is not None:
            y = add_skip(y, skip)
        return y
