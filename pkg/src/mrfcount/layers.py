"""Neural building blocks: convolution, batch norm, pooling, bilinear
upsampling, fully connected layers, and the residual units/modules the
network is composed of.

Layers are small ``Module`` objects holding parameter tensors; the forward
pass builds the autodiff graph through :mod:`mrfcount.tensor`.  Convolutions
lower onto matrix multiplies (im2col) so the heavy lifting stays inside BLAS.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, make_op, relu


class Module:
    """Base class providing parameter/buffer discovery and train/eval mode."""

    _buffer_names: tuple = ()

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> Iterator[Tensor]:
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        self.steps = list(modules)

    def forward(self, x: Tensor) -> Tensor:
        for step in self.steps:
            x = step(x)
        return x


# -- convolution ---------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    # (C*kh*kw, N*oh*ow) layout: the copy's inner loop runs along output
    # width, and the result feeds a single GEMM without further shuffling.
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(c, kh, kw, n, oh, ow),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride), writeable=False)
    return np.ascontiguousarray(cols).reshape(c * kh * kw, n * oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with symmetric zero padding, NCHW layout."""
    xd, wd = x.data, weight.data
    n, c, h, w = xd.shape
    oc, ic, kh, kw = wd.shape
    if c != ic:
        raise ValueError(
            f"conv2d: input has {c} channels but kernel expects {ic}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"conv2d: non-positive output extent {oh}x{ow} for input "
            f"{h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias)

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = wd.reshape(oc, -1)
    out = np.ascontiguousarray(
        (wmat @ cols).reshape(oc, n, oh, ow).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, n * oh * ow)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gcols = (wmat.T @ g2).reshape(c, kh, kw, n, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride,
                    j:j + stride * ow:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, "conv2d", inputs, backward)


def _conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    xd = x.data
    n, c, h, w = xd.shape
    oc = weight.data.shape[0]
    wmat = weight.data.reshape(oc, c)
    xmat = xd.reshape(n, c, h * w)
    out = np.matmul(wmat, xmat).reshape(n, oc, h, w)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gmat = g.reshape(n, oc, h * w)
        gx = np.matmul(wmat.T, gmat).reshape(xd.shape)
        gw = np.matmul(gmat, xmat.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, "conv1x1", inputs, backward)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 dtype=np.float32, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        fan_out = out_channels * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_out)
        self.weight = Tensor(
            rng.normal(0.0, std, (out_channels, in_channels,
                                  kernel_size, kernel_size)),
            requires_grad=True, dtype=dtype)
        self.bias = (Tensor(np.zeros(out_channels), requires_grad=True,
                            dtype=dtype) if bias else None)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


# -- batch normalization --------------------------------------------------------

class BatchNorm2d(Module):
    """Per-channel standardization over (N, H, W) with running statistics.

    Training mode normalizes with batch statistics and updates the running
    mean/variance by exponential moving average; inference mode applies the
    stored statistics.  The affine transform (gamma, beta) is learnable.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise ValueError(f"batch_norm expects NCHW input, got {x.shape}")
        if self.training:
            return self._forward_train(x)
        return self._forward_eval(x)

    def _forward_train(self, x: Tensor) -> Tensor:
        xd = x.data
        n, c, h, w = xd.shape
        m = n * h * w
        if m < 2:
            raise ValueError(
                "batch_norm training mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xd - mu.reshape(1, c, 1, 1)
        xhat *= inv.reshape(1, c, 1, 1)
        gd, bd = self.gamma.data, self.beta.data
        out = gd.reshape(1, c, 1, 1) * xhat
        out += bd.reshape(1, c, 1, 1)

        mom = self.momentum
        unbiased = var * (m / (m - 1))
        self.running_mean += (mom * (mu - self.running_mean)).astype(
            self.running_mean.dtype, copy=False)
        self.running_var += (mom * (unbiased - self.running_var)).astype(
            self.running_var.dtype, copy=False)

        def backward(g):
            gsum = g.sum(axis=(0, 2, 3))
            gx_xhat = (g * xhat).sum(axis=(0, 2, 3))
            coeff = (gd * inv / m).reshape(1, c, 1, 1)
            gx = coeff * (m * g
                          - gsum.reshape(1, c, 1, 1)
                          - xhat * gx_xhat.reshape(1, c, 1, 1))
            return gx, gx_xhat, gsum

        return make_op(out, "batch_norm", (x, self.gamma, self.beta), backward)

    def _forward_eval(self, x: Tensor) -> Tensor:
        xd = x.data
        c = xd.shape[1]
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = (xd - self.running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        gd, bd = self.gamma.data, self.beta.data
        out = gd.reshape(1, c, 1, 1) * xhat + bd.reshape(1, c, 1, 1)

        def backward(g):
            gx = g * (gd * inv).reshape(1, c, 1, 1)
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            return gx, ggamma, gbeta

        return make_op(out, "batch_norm_eval", (x, self.gamma, self.beta), backward)


# -- pooling and resampling ------------------------------------------------------

class AvgPool2d(Module):
    """2x2 average pooling with stride 2; spatial extents must be even."""

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.data.shape
        if h % 2 or w % 2:
            raise ValueError(f"avg_pool needs even spatial extents, got {h}x{w}")
        out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def backward(g):
            gq = np.broadcast_to((g * 0.25)[:, :, :, None, :, None],
                                 (n, c, h // 2, 2, w // 2, 2))
            return (gq.reshape(n, c, h, w),)

        return make_op(out, "avg_pool", (x,), backward)


def _interp_coeffs(in_size: int, factor: int):
    # Half-pixel-centers sampling convention with edge clamping; symmetric
    # under horizontal/vertical flips.
    out = in_size * factor
    src = (np.arange(out, dtype=np.float64) + 0.5) / factor - 0.5
    base = np.floor(src)
    frac = src - base
    i0 = np.clip(base.astype(np.int64), 0, in_size - 1)
    i1 = np.clip(base.astype(np.int64) + 1, 0, in_size - 1)
    return i0, i1, frac


def _interp_axis(arr: np.ndarray, i0, i1, frac, axis: int) -> np.ndarray:
    shape = [1] * arr.ndim
    shape[axis] = len(frac)
    wl = frac.reshape(shape).astype(arr.dtype)
    return np.take(arr, i0, axis=axis) * (1 - wl) + np.take(arr, i1, axis=axis) * wl


def _scatter_axis(target: np.ndarray, idx, updates: np.ndarray, axis: int):
    np.add.at(np.moveaxis(target, axis, 0), idx, np.moveaxis(updates, axis, 0))


class BilinearUpsample(Module):
    """Integer-factor bilinear upsampling of NCHW maps."""

    def __init__(self, factor: int):
        super().__init__()
        if factor < 1:
            raise ValueError(f"upsample factor must be >= 1, got {factor}")
        self.factor = factor

    def forward(self, x: Tensor) -> Tensor:
        if self.factor == 1:
            return x
        n, c, h, w = x.data.shape
        r0, r1, rf = _interp_coeffs(h, self.factor)
        c0, c1, cf = _interp_coeffs(w, self.factor)
        tmp = _interp_axis(x.data, r0, r1, rf, axis=2)
        out = _interp_axis(tmp, c0, c1, cf, axis=3)
        oh, ow = h * self.factor, w * self.factor

        def backward(g):
            cfw = cf.reshape(1, 1, 1, ow).astype(g.dtype)
            gtmp = np.zeros((n, c, oh, w), dtype=g.dtype)
            _scatter_axis(gtmp, c0, g * (1 - cfw), axis=3)
            _scatter_axis(gtmp, c1, g * cfw, axis=3)
            rfw = rf.reshape(1, 1, oh, 1).astype(g.dtype)
            gx = np.zeros((n, c, h, w), dtype=g.dtype)
            _scatter_axis(gx, r0, gtmp * (1 - rfw), axis=2)
            _scatter_axis(gx, r1, gtmp * rfw, axis=2)
            return (gx,)

        return make_op(out, "bilinear_upsample", (x,), backward)


# -- fully connected --------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_features: int, out_features: int, dtype=np.float32,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (in_features, out_features)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        xd = x.data
        if xd.ndim != 2:
            raise ValueError(f"fully_connected expects a 2-d batch, got {x.shape}")
        wd, bd = self.weight.data, self.bias.data
        if xd.shape[1] != wd.shape[0]:
            raise ValueError(
                f"fully_connected: input length {xd.shape[1]} does not match "
                f"weight rows {wd.shape[0]}")
        out = xd @ wd + bd

        def backward(g):
            return g @ wd.T, xd.T @ g, g.sum(axis=0)

        return make_op(out, "fully_connected", (x, self.weight, self.bias), backward)


# -- composite blocks --------------------------------------------------------------

class ConvBNReLU(Module):
    """Convolution (no bias) -> batch norm -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, dtype=np.float32,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride,
                           padding, bias=False, dtype=dtype, rng=rng)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class ResidualUnit(Module):
    """Skip-connected block; output shape always equals the main-branch output.

    ``two_layer`` stacks two 3x3 convolutions.  ``three_layer`` is the
    bottleneck variant: 1x1 down to channels//4, 3x3, 1x1 back up.  The last
    convolution is followed by batch norm only; ReLU is applied after the
    skip addition.  A 1x1 projection is inserted on the skip path exactly
    when the input width differs from the output width.
    """

    def __init__(self, channels: int, kind: str, in_channels: Optional[int] = None,
                 dtype=np.float32, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kind not in ("two_layer", "three_layer"):
            raise ValueError(f"unknown residual unit kind {kind!r}")
        self.kind = kind
        in_channels = channels if in_channels is None else in_channels
        if kind == "two_layer":
            self.conv1 = Conv2d(in_channels, channels, 3, 1, 1, bias=False,
                                dtype=dtype, rng=rng)
            self.bn1 = BatchNorm2d(channels, dtype=dtype)
            self.conv2 = Conv2d(channels, channels, 3, 1, 1, bias=False,
                                dtype=dtype, rng=rng)
            self.bn2 = BatchNorm2d(channels, dtype=dtype)
            self.conv3 = None
        else:
            mid = max(channels // 4, 1)
            self.conv1 = Conv2d(in_channels, mid, 1, bias=False, dtype=dtype, rng=rng)
            self.bn1 = BatchNorm2d(mid, dtype=dtype)
            self.conv2 = Conv2d(mid, mid, 3, 1, 1, bias=False, dtype=dtype, rng=rng)
            self.bn2 = BatchNorm2d(mid, dtype=dtype)
            self.conv3 = Conv2d(mid, channels, 1, bias=False, dtype=dtype, rng=rng)
            self.bn3 = BatchNorm2d(channels, dtype=dtype)
        if in_channels != channels:
            self.proj = Conv2d(in_channels, channels, 1, bias=False,
                               dtype=dtype, rng=rng)
            self.proj_bn = BatchNorm2d(channels, dtype=dtype)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        if self.conv3 is None:
            h = self.bn2(self.conv2(h))
        else:
            h = relu(self.bn2(self.conv2(h)))
            h = self.bn3(self.conv3(h))
        skip = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return relu(h + skip)


class ResidualModule(Module):
    """Four residual units of one kind applied in sequence."""

    UNITS = 4

    def __init__(self, channels: int, kind: str, in_channels: Optional[int] = None,
                 dtype=np.float32, rng: Optional[np.random.Generator] = None):
        super().__init__()
        units = [ResidualUnit(channels, kind, in_channels, dtype=dtype, rng=rng)]
        for _ in range(self.UNITS - 1):
            units.append(ResidualUnit(channels, kind, dtype=dtype, rng=rng))
        self.units = units

    def forward(self, x: Tensor) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x


def zero_parameters(module: Module):
    """Overwrite every parameter with zeros (test helper for zero networks)."""
    for p in module.parameters():
        p.data[...] = 0
