"""Network-level ops on top of the tensor engine.

Convolution runs through an im2col layout so the heavy lifting is one
matmul per op; normalization and resampling carry hand-derived backward
passes.  Resampling of all three modes (bilinear / nearest / adaptive
average) is expressed as a pair of per-axis operator matrices, which makes
the backward pass a transpose and keeps same-size resampling an exact
identity.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError
from .tensor import Tensor, _accumulate, _make, expand, relu, reshape

# -- convolution -------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _patches(xp: np.ndarray, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """Strided (B, C, kh, kw, ho, wo) view over the padded input."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding=0,
    dilation: int = 1,
) -> Tensor:
    """2-D convolution (cross-correlation) over (B, C, H, W).

    ``padding`` may be an int or an (ph, pw) pair so 1xk / kx1 kernels can
    stay size-preserving.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input/weight, got {x.shape} and {weight.shape}"
        )
    b, c_in, h, w = x.shape
    c_out, c_k, kh, kw = weight.shape
    if c_k != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input axis 1 has {c_in}, kernel expects {c_k}"
        )
    if dilation < 1:
        raise DimensionError(f"conv2d dilation must be >= 1, got {dilation}")
    ph, pw = _pair(padding)
    stride = int(stride)
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    hp, wp = h + 2 * ph, w + 2 * pw
    if eff_h > hp or eff_w > wp:
        raise DimensionError(
            f"conv2d kernel footprint ({eff_h}x{eff_w}) exceeds padded input "
            f"({hp}x{wp}) on spatial axes 2/3"
        )
    ho = (hp - eff_h) // stride + 1
    wo = (wp - eff_w) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _patches(xp, kh, kw, stride, dilation, ho, wo).reshape(
        b, c_in * kh * kw, ho * wo
    )
    wflat = weight.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(wflat, cols).reshape(b, c_out, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gflat = g.reshape(b, c_out, ho * wo)
        if weight.requires_grad:
            dw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gflat.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wflat.T, gflat).reshape(b, c_in, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                hi = i * dilation
                for j in range(kw):
                    wj = j * dilation
                    dxp[
                        :, :, hi : hi + ho * stride : stride, wj : wj + wo * stride : stride
                    ] += dcols[:, :, i, j]
            dx = dxp[:, :, ph : ph + h, pw : pw + w]
            _accumulate(x, np.ascontiguousarray(dx))

    return _make(out, parents, backward)


# -- normalization -------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Training mode normalizes with mini-batch statistics and updates the
    running buffers in place (biased variance for both, documented);
    eval mode reads the running buffers.  ``eps`` keeps zero-variance
    inputs finite, so a constant input maps to zeros before the affine.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batchnorm2d affine params must have shape (C,)")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            scale = (gamma.data * inv_std).reshape(1, c, 1, 1)
            if training:
                n = x.size // c
                g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
                gx_mean = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) / n
                _accumulate(x, scale * (g - g_mean - xhat * gx_mean))
            else:
                _accumulate(x, scale * g)

    return _make(out, (x, gamma, beta), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis at each (b, h, w) site."""
    if x.ndim != 4:
        raise DimensionError(f"layernorm expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("layernorm affine params must have shape (C,)")

    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gs = g * gamma.data.reshape(1, c, 1, 1)
            g_mean = gs.mean(axis=1, keepdims=True)
            gx_mean = (gs * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, inv_std * (gs - g_mean - xhat * gx_mean))

    return _make(out, (x, gamma, beta), backward)


# -- resampling ----------------------------------------------------------------


def _axis_operator(mode: str, n_in: int, n_out: int, dtype) -> np.ndarray:
    """(n_out, n_in) interpolation/averaging matrix for one spatial axis."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if mode == "bilinear":
        # half-pixel centers (align_corners=False), borders replicated
        for i in range(n_out):
            src = (i + 0.5) * n_in / n_out - 0.5
            i0 = int(np.floor(src))
            frac = src - i0
            m[i, min(max(i0, 0), n_in - 1)] += 1.0 - frac
            m[i, min(max(i0 + 1, 0), n_in - 1)] += frac
    elif mode == "nearest":
        for i in range(n_out):
            m[i, min(int(i * n_in / n_out), n_in - 1)] = 1.0
    elif mode == "adaptive_avg":
        for i in range(n_out):
            lo = (i * n_in) // n_out
            hi = -((-(i + 1) * n_in) // n_out)  # ceil
            m[i, lo:hi] = 1.0 / (hi - lo)
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return m


def resample(x: Tensor, out_hw, mode: str = "bilinear") -> Tensor:
    """Resize (B, C, H, W) to ``out_hw`` spatial extents.

    Modes: ``bilinear`` (half-pixel convention, fixed), ``nearest``,
    ``adaptive_avg`` (near-equal bins, exact block means when the sizes
    divide evenly).  Resampling to the same size is the identity in every
    mode.
    """
    if x.ndim != 4:
        raise DimensionError(f"resample expects 4-d input, got {x.shape}")
    ho, wo = int(out_hw[0]), int(out_hw[1])
    if ho < 1 or wo < 1:
        raise DimensionError(f"resample target must be >= 1, got ({ho}, {wo})")
    _, _, h, w = x.shape
    rr = _axis_operator(mode, h, ho, x.dtype)
    rc_t = _axis_operator(mode, w, wo, x.dtype).T

    out = np.matmul(np.matmul(rr, x.data), rc_t)

    def backward(g):
        _accumulate(x, np.matmul(np.matmul(rr.T, g), rc_t.T))

    return _make(out, (x,), backward)


def adaptive_avg_pool(x: Tensor, out_hw) -> Tensor:
    return resample(x, out_hw, mode="adaptive_avg")


# -- parameter structures ---------------------------------------------------


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class ConvBlockParams:
    """One conv -> batchnorm -> relu block.

    ``kernels`` holds a single weight for plain/atrous blocks and the
    [3x3, 1x3, 3x1] triple for the asymmetric block, whose outputs are
    summed before normalization.  ``bias`` stays None under batchnorm
    (the shift would be normalized away and its gradient would vanish);
    it exists for bare-conv uses of the same record.
    """

    kernels: list[Tensor]
    norm: BatchNormParams
    bias: Tensor | None = None
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        c_out = self.kernels[0].shape[0]
        c_in = self.kernels[0].shape[1]
        for k in self.kernels:
            if k.shape[0] != c_out or k.shape[1] != c_in:
                raise DimensionError(
                    "all kernels in a block must share in/out channel counts"
                )


def make_batchnorm(c: int, rng=None, dtype=np.float64) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(c, dtype=dtype),
        running_var=np.ones(c, dtype=dtype),
    )


def kaiming_weight(rng: np.random.Generator, c_out, c_in, kh, kw, dtype) -> Tensor:
    fan_in = c_in * kh * kw
    std = np.sqrt(2.0 / fan_in)
    data = rng.normal(0.0, std, size=(c_out, c_in, kh, kw)).astype(dtype)
    return Tensor(data, requires_grad=True)


def make_conv_block(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    kernel=3,
    dilation: int = 1,
    stride: int = 1,
    asymmetric: bool = False,
    dtype=np.float64,
) -> ConvBlockParams:
    kh, kw = _pair(kernel)
    if asymmetric:
        kernels = [
            kaiming_weight(rng, c_out, c_in, 3, 3, dtype),
            kaiming_weight(rng, c_out, c_in, 1, 3, dtype),
            kaiming_weight(rng, c_out, c_in, 3, 1, dtype),
        ]
    else:
        kernels = [kaiming_weight(rng, c_out, c_in, kh, kw, dtype)]
    return ConvBlockParams(
        kernels=kernels,
        norm=make_batchnorm(c_out, dtype=dtype),
        dilation=dilation,
        stride=stride,
    )


def block_preact(x: Tensor, params: ConvBlockParams) -> Tensor:
    """Summed convolution outputs of a block, before norm and relu.

    Per-kernel padding is chosen size-preserving for stride 1:
    d*(k-1)//2 on each axis, i.e. (1,1)/(0,1)/(1,0) for the asymmetric
    triple at dilation 1.
    """
    d = params.dilation
    out = None
    for k in params.kernels:
        _, _, kh, kw = k.shape
        pad = (d * (kh - 1) // 2, d * (kw - 1) // 2)
        y = conv2d(x, k, bias=None, stride=params.stride, padding=pad, dilation=d)
        out = y if out is None else out + y
    if params.bias is not None:
        c = params.bias.shape[0]
        out = out + expand(reshape(params.bias, (1, c, 1, 1)), out.shape)
    return out


def block_forward(x: Tensor, params: ConvBlockParams, training: bool) -> Tensor:
    pre = block_preact(x, params)
    normed = batchnorm2d(
        pre,
        params.norm.gamma,
        params.norm.beta,
        params.norm.running_mean,
        params.norm.running_var,
        training=training,
        momentum=params.norm.momentum,
        eps=params.norm.eps,
    )
    return relu(normed)


# -- parameter traversal ------------------------------------------------------


def named_arrays(obj, prefix: str = ""):
    """Yield (name, array, is_param) for every Tensor / ndarray in a struct.

    Walks dataclasses, lists, tuples and dicts depth-first in field order,
    so the enumeration order is deterministic and usable as a checkpoint
    schema.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj.data, obj.requires_grad
    elif isinstance(obj, np.ndarray):
        yield prefix, obj, False
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_arrays(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_arrays(item, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for key in obj:
            yield from named_arrays(obj[key], f"{prefix}.{key}")
    # scalars / strings / None carry no arrays


def parameters(obj) -> list[Tensor]:
    """All trainable tensors in a parameter struct, in traversal order."""
    out = []

    def walk(o):
        if isinstance(o, Tensor):
            if o.requires_grad:
                out.append(o)
        elif is_dataclass(o):
            for f in fields(o):
                walk(getattr(o, f.name))
        elif isinstance(o, (list, tuple)):
            for item in o:
                walk(item)
        elif isinstance(o, dict):
            for key in o:
                walk(o[key])

    walk(obj)
    return out


def load_arrays_into(obj, arrays: dict[str, np.ndarray]) -> None:
    """Assign saved arrays back into a parameter struct, in place."""
    for name, arr, is_param in named_arrays(obj):
        if name not in arrays:
            raise KeyError(f"checkpoint missing array {name!r}")
        src = arrays[name]
        if tuple(src.shape) != tuple(arr.shape):
            raise DimensionError(
                f"checkpoint array {name!r} has shape {src.shape}, expected {arr.shape}"
            )
        arr[...] = src
