"""Integrity channel enhancement.

Fuses three adjacent feature levels at the middle level's resolution,
summarizes each channel by its spatial l2 norm (the integrity embedding),
pushes that descriptor through a 1x1 squeeze -> layernorm -> relu -> 1x1
excite bottleneck, and multiplies the resulting per-channel weights back
over the fused map.  One parameter record serves every call site, so the
enhancement is shared across levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .nn import ConvBlockParams, block_forward, conv2d, layernorm, make_conv_block, resample
from .tensor import Tensor, concat, expand, mul, relu, sqrt, tsum


@dataclass
class IceParams:
    """Shared bottleneck + output reduction for all enhancement call sites."""

    squeeze_w: Tensor  # (C/ratio, C, 1, 1)
    squeeze_b: Tensor
    ln_gamma: Tensor  # (C/ratio,)
    ln_beta: Tensor
    excite_w: Tensor  # (C, C/ratio, 1, 1)
    excite_b: Tensor
    reduce: ConvBlockParams  # 1x1 block, C -> decoder width


def make_ice_params(
    rng: np.random.Generator,
    c_fuse: int,
    decoder_width: int,
    ratio: int = 4,
    dtype=np.float64,
) -> IceParams:
    c_mid = max(1, c_fuse // ratio)
    std_in = np.sqrt(2.0 / c_fuse)
    std_out = np.sqrt(2.0 / c_mid)
    return IceParams(
        squeeze_w=Tensor(rng.normal(0, std_in, (c_mid, c_fuse, 1, 1)).astype(dtype), requires_grad=True),
        squeeze_b=Tensor(np.zeros(c_mid, dtype=dtype), requires_grad=True),
        ln_gamma=Tensor(np.ones(c_mid, dtype=dtype), requires_grad=True),
        ln_beta=Tensor(np.zeros(c_mid, dtype=dtype), requires_grad=True),
        excite_w=Tensor(rng.normal(0, std_out, (c_fuse, c_mid, 1, 1)).astype(dtype), requires_grad=True),
        excite_b=Tensor(np.zeros(c_fuse, dtype=dtype), requires_grad=True),
        reduce=make_conv_block(rng, c_fuse, decoder_width, kernel=1, dtype=dtype),
    )


def fuse_adjacent(
    cur: Tensor,
    prev: Tensor | None = None,
    nxt: Tensor | None = None,
) -> Tensor:
    """Channel-concat [prev, cur, next] at the current level's resolution.

    Missing neighbors are filled with the current level's feature.  The
    previous (shallower, larger) level is downsampled by adaptive
    averaging; the next (deeper, smaller) level is upsampled bilinearly.
    """
    target = cur.shape[2:]
    if prev is None:
        prev = cur
    if nxt is None:
        nxt = cur
    if prev.shape[2:] != tuple(target):
        prev = resample(prev, target, mode="adaptive_avg")
    if nxt.shape[2:] != tuple(target):
        nxt = resample(nxt, target, mode="bilinear")
    return concat([prev, cur, nxt], axis=1)


def integrity_embedding(f_fuse: Tensor) -> Tensor:
    """Per-channel spatial l2 norm, shape (B, C, 1, 1).

    A 1e-24 addend under the square root keeps the gradient finite on
    all-zero channels without moving any value at double precision.
    """
    if f_fuse.ndim != 4:
        raise DimensionError(f"integrity_embedding expects 4-d input, got {f_fuse.shape}")
    sq = tsum(mul(f_fuse, f_fuse), axis=(2, 3), keepdims=True)
    return sqrt(sq + 1e-24)


def ice_attention(emb: Tensor, params: IceParams) -> Tensor:
    """Bottleneck transform of the embedding into per-channel weights (B, C, 1, 1)."""
    h = conv2d(emb, params.squeeze_w, bias=params.squeeze_b)
    h = relu(layernorm(h, params.ln_gamma, params.ln_beta))
    return conv2d(h, params.excite_w, bias=params.excite_b)


def ice_enhance(f_fuse: Tensor, params: IceParams) -> Tensor:
    """Fused map reweighted channel-wise; same shape as the input."""
    att = ice_attention(integrity_embedding(f_fuse), params)
    if att.shape[1] != f_fuse.shape[1]:
        raise DimensionError(
            f"attention channels {att.shape[1]} != fused channels {f_fuse.shape[1]}"
        )
    return mul(f_fuse, expand(att, f_fuse.shape))


def ice_forward(f_fuse: Tensor, params: IceParams, training: bool = False) -> Tensor:
    """Enhanced map reduced to decoder width by the shared 1x1 block."""
    return block_forward(ice_enhance(f_fuse, params), params.reduce, training)


def dump_channel_heatmap(feature: Tensor, path) -> None:
    """Debug view: mean absolute activation across channels as a gray PNG."""
    from PIL import Image

    m = np.abs(feature.data).mean(axis=(0, 1))
    span = m.max() - m.min()
    if span > 0:
        m = (m - m.min()) / span
    else:
        m = np.zeros_like(m)
    Image.fromarray(np.round(m * 255).astype(np.uint8), mode="L").save(path)
