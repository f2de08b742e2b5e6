"""Diverse feature aggregation: three parallel conv branches, concatenated.

One level's aggregation runs an asymmetric (crux-shaped) branch, an atrous
branch and a plain 3x3 branch over the same backbone feature and stacks
the results along channels.  Branch kinds are configurable so the
single-kind ablations (3x plain / 3x atrous / 3x asymmetric) stay
runnable.  A 1x1 block then takes the stack back down to the shared
decoder width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import ConvBlockParams, block_forward, make_conv_block
from .tensor import Tensor, concat

BRANCH_KINDS = ("asy", "atr", "ori")


@dataclass
class DfaParams:
    branches: list[ConvBlockParams]
    kinds: tuple[str, ...]
    reduce: ConvBlockParams
    level: int = 0


def make_dfa_params(
    rng: np.random.Generator,
    c_in: int,
    branch_width: int,
    decoder_width: int,
    level: int = 0,
    kinds: tuple[str, ...] = BRANCH_KINDS,
    atrous_rate: int = 2,
    dtype=np.float64,
) -> DfaParams:
    branches = []
    for kind in kinds:
        if kind == "asy":
            branches.append(
                make_conv_block(rng, c_in, branch_width, asymmetric=True, dtype=dtype)
            )
        elif kind == "atr":
            branches.append(
                make_conv_block(rng, c_in, branch_width, dilation=atrous_rate, dtype=dtype)
            )
        elif kind == "ori":
            branches.append(make_conv_block(rng, c_in, branch_width, dtype=dtype))
        else:
            raise ConfigError(f"unknown branch kind {kind!r}; use one of {BRANCH_KINDS}")
    reduce = make_conv_block(
        rng, branch_width * len(kinds), decoder_width, kernel=1, dtype=dtype
    )
    return DfaParams(branches=branches, kinds=tuple(kinds), reduce=reduce, level=level)


def asy_conv(x: Tensor, params: ConvBlockParams, training: bool = False) -> Tensor:
    """Crux-shaped conv: 3x3 + 1x3 + 3x1 summed in the same window, then BN+ReLU."""
    if len(params.kernels) != 3:
        raise ConfigError("asymmetric block needs exactly three kernels (3x3, 1x3, 3x1)")
    return block_forward(x, params, training)


def atr_conv(x: Tensor, params: ConvBlockParams, rate: int | None = None, training: bool = False) -> Tensor:
    """3x3 conv with dilation=rate and padding=rate (size-preserving), then BN+ReLU."""
    if rate is not None and rate != params.dilation:
        params = ConvBlockParams(
            kernels=params.kernels,
            norm=params.norm,
            bias=params.bias,
            dilation=rate,
            stride=params.stride,
        )
    return block_forward(x, params, training)


def ori_conv(x: Tensor, params: ConvBlockParams, training: bool = False) -> Tensor:
    return block_forward(x, params, training)


def dfa_forward(x: Tensor, params: DfaParams, training: bool = False) -> Tensor:
    """Concatenated branch outputs; channels = len(kinds) * branch width."""
    outs = [block_forward(x, bp, training) for bp in params.branches]
    return concat(outs, axis=1)


def dfa_reduce(stacked: Tensor, params: DfaParams, training: bool = False) -> Tensor:
    """1x1 block taking the branch stack to the decoder width."""
    return block_forward(stacked, params.reduce, training)


def dfa_level(x: Tensor, params: DfaParams, training: bool = False) -> Tensor:
    return dfa_reduce(dfa_forward(x, params, training), params, training)


def fuse_asymmetric_kernel(params: ConvBlockParams) -> np.ndarray:
    """Single 3x3 kernel equivalent to the asymmetric triple (pre-norm).

    Center-pads the 1x3 and 3x1 kernels into 3x3 and sums; with zero
    padding the summed convolution equals the branch sum everywhere.
    """
    k33, k13, k31 = (k.data for k in params.kernels)
    fused = k33.copy()
    fused[:, :, 1:2, :] += k13
    fused[:, :, :, 1:2] += k31
    return fused
