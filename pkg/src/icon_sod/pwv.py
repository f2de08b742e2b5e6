"""Part-whole verification: a capsule layer with EM routing-by-agreement.

Features reduced to a small grid are split per site into capsule types,
each carrying a pose matrix and an activation.  Lower capsules vote for
higher ones through learned transform matrices; EM routing clusters the
votes (Gaussian M-step, responsibility E-step) into higher-level poses and
activations, which are re-flattened into a dense feature map.  Routing is
per-site across types (a 1x1 routing window), so spatial sites are
independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import ConvBlockParams, conv2d, make_conv_block, resample
from .tensor import (
    Tensor,
    add,
    clamp,
    concat,
    div,
    expand,
    log,
    matmul,
    mul,
    narrow,
    permute,
    reshape,
    sigmoid,
    softmax,
    sub,
    tsum,
)

_MASS_EPS = 1e-12  # zero-assignment-mass guard; exact when mass is above it
_ACT_EPS = 1e-30  # keeps log(activation) finite under extreme saturation


@dataclass
class CapsuleState:
    """Poses (..., T, p_r, p_c) and activations (..., T) for a capsule field."""

    poses: Tensor
    activations: Tensor


@dataclass
class RoutingAssignment:
    """Responsibilities r_ij, shape (..., T_lower, T_higher); rows sum to 1."""

    r: Tensor


@dataclass
class TransformParams:
    transforms: Tensor  # (T_lower, T_higher, p_r, p_r)
    beta_a: Tensor  # (T_higher,) activation gain
    beta_u: Tensor  # (T_higher,) per-dimension description cost


@dataclass
class PwvParams:
    in_proj_w: Tensor  # 1x1 conv, decoder width -> T_lower*(pose_size+1)
    in_proj_b: Tensor
    transform: TransformParams
    out_block: ConvBlockParams  # 1x1 block, T_higher*(pose_size+1) -> decoder width
    pose_shape: tuple[int, int] = (4, 4)
    n_lower: int = 8
    n_higher: int = 8
    iterations: int = 3


def make_pwv_params(
    rng: np.random.Generator,
    decoder_width: int,
    pose_shape: tuple[int, int] = (4, 4),
    n_lower: int = 8,
    n_higher: int = 8,
    iterations: int = 3,
    dtype=np.float64,
) -> PwvParams:
    pr, pc = pose_shape
    d = pr * pc
    c_caps_in = n_lower * (d + 1)
    c_caps_out = n_higher * (d + 1)
    std = np.sqrt(2.0 / decoder_width)
    # transforms start near identity so early routing preserves pose content
    t = np.broadcast_to(np.eye(pr, dtype=dtype), (n_lower, n_higher, pr, pr)).copy()
    t += rng.normal(0.0, 0.1, size=t.shape)
    return PwvParams(
        in_proj_w=Tensor(
            rng.normal(0, std, (c_caps_in, decoder_width, 1, 1)).astype(dtype),
            requires_grad=True,
        ),
        in_proj_b=Tensor(np.zeros(c_caps_in, dtype=dtype), requires_grad=True),
        transform=TransformParams(
            transforms=Tensor(t.astype(dtype), requires_grad=True),
            beta_a=Tensor(np.zeros(n_higher, dtype=dtype), requires_grad=True),
            beta_u=Tensor(np.zeros(n_higher, dtype=dtype), requires_grad=True),
        ),
        out_block=make_conv_block(rng, c_caps_out, decoder_width, kernel=1, dtype=dtype),
        pose_shape=tuple(pose_shape),
        n_lower=n_lower,
        n_higher=n_higher,
        iterations=iterations,
    )


# -- grid reduction -----------------------------------------------------------


def reduce_to_grid(f: Tensor, grid: int | tuple[int, int]) -> Tensor:
    """Adaptive average pooling down to the capsule grid."""
    gh, gw = (grid, grid) if isinstance(grid, int) else grid
    if f.shape[2] < gh or f.shape[3] < gw:
        raise DimensionError(
            f"grid ({gh}x{gw}) larger than input spatial dims {f.shape[2:]}; "
            "upsample first"
        )
    return resample(f, (gh, gw), mode="adaptive_avg")


# -- capsule packing ----------------------------------------------------------


def split_capsule_channels(f: Tensor, pose_shape, n_types: int):
    """Partition (B, C, H, W) into pose maps and raw activation logits.

    Channel t*(d+1)..t*(d+1)+d-1 are capsule t's pose values, the next one
    its activation logit.  Returns poses (B, H, W, T, p_r, p_c) and logits
    (B, H, W, T).
    """
    pr, pc = pose_shape
    d = pr * pc
    b, c, h, w = f.shape
    if c % (d + 1) != 0 or c != n_types * (d + 1):
        raise ConfigError(
            f"channel count {c} does not partition into {n_types} capsules "
            f"of {d} pose values + 1 activation"
        )
    g = reshape(f, (b, n_types, d + 1, h, w))
    poses = narrow(g, 2, 0, d)
    logits = narrow(g, 2, d, 1)
    poses = reshape(permute(poses, (0, 3, 4, 1, 2)), (b, h, w, n_types, pr, pc))
    logits = reshape(permute(logits, (0, 3, 4, 1, 2)), (b, h, w, n_types))
    return poses, logits


def merge_capsule_channels(poses: Tensor, acts: Tensor) -> Tensor:
    """Inverse of :func:`split_capsule_channels` (activation values in place
    of logits)."""
    b, h, w, n_types, pr, pc = poses.shape
    d = pr * pc
    flat = reshape(poses, (b, h, w, n_types, d))
    packed = concat([flat, reshape(acts, (b, h, w, n_types, 1))], axis=4)
    packed = reshape(packed, (b, h, w, n_types * (d + 1)))
    return permute(packed, (0, 3, 1, 2))


def make_primary_capsules(f: Tensor, pose_shape=(4, 4), n_types: int = 8) -> CapsuleState:
    """Primary capsules: raw pose values, sigmoid of the activation channel."""
    poses, logits = split_capsule_channels(f, pose_shape, n_types)
    return CapsuleState(poses=poses, activations=sigmoid(logits))


def capsules_to_map(state: CapsuleState) -> Tensor:
    """Re-densify capsules: poses and activations concatenated as channels."""
    return merge_capsule_channels(state.poses, state.activations)


# -- votes ---------------------------------------------------------------------


def compute_votes(state: CapsuleState, transform: TransformParams) -> Tensor:
    """Votes T_ij @ M_i, shape (..., T_lower, T_higher, p_r, p_c)."""
    poses = state.poses
    lead = poses.shape[:-3]
    n_lower, pr, pc = poses.shape[-3:]
    t_lower, t_higher, t_pr, _ = transform.transforms.shape
    if t_lower != n_lower or t_pr != pr:
        raise DimensionError(
            f"transforms {transform.transforms.shape} do not match poses {poses.shape}"
        )
    m = reshape(poses, lead + (n_lower, 1, pr, pc))
    m = expand(m, lead + (n_lower, t_higher, pr, pc))
    t = reshape(transform.transforms, (1,) * len(lead) + (n_lower, t_higher, pr, pr))
    t = expand(t, lead + (n_lower, t_higher, pr, pr))
    return matmul(t, m)


# -- EM routing -----------------------------------------------------------------


def _lambda_schedule(iterations: int, start: float = 1.0, end: float = 3.0):
    if iterations < 1:
        raise ConfigError(f"routing needs iterations >= 1, got {iterations}")
    if iterations == 1:
        return [start]
    return [start + (end - start) * t / (iterations - 1) for t in range(iterations)]


def em_routing(
    votes: Tensor,
    lower_activations: Tensor,
    params: TransformParams,
    iterations: int = 3,
    var_floor: float = 1e-6,
    trace: list | None = None,
) -> tuple[CapsuleState, RoutingAssignment]:
    """Cluster votes into higher capsules by expectation-maximization.

    votes: (..., T_lower, T_higher, p_r, p_c); lower_activations: (..., T_lower).

    Each iteration runs an M-step (assignment-weighted Gaussian mean and
    variance per higher capsule; activation = logistic of the inverse
    temperature times beta_a minus the description cost) and, between
    iterations, an E-step (responsibilities proportional to activation
    times Gaussian likelihood, normalized over higher capsules for every
    lower capsule).  Zero assignment mass falls back to an epsilon
    denominator; the guard leaves nonzero-mass arithmetic exact.

    ``trace``, when given, collects the responsibility array after every
    E-step.  Returns the final capsules and the assignment used by the
    last M-step.
    """
    lead = votes.shape[:-4]
    n_lower, n_higher, pr, pc = votes.shape[-4:]
    d = pr * pc
    if lower_activations.shape != lead + (n_lower,):
        raise DimensionError(
            f"lower activations {lower_activations.shape} do not match votes {votes.shape}"
        )
    s = int(np.prod(lead)) if lead else 1

    v = reshape(votes, (s, n_lower, n_higher, d))
    a_i = reshape(lower_activations, (s, n_lower, 1, 1))
    a_i_e = expand(a_i, (s, n_lower, n_higher, 1))

    beta_a = expand(reshape(params.beta_a, (1, 1, n_higher, 1)), (s, 1, n_higher, 1))
    beta_u = expand(reshape(params.beta_u, (1, 1, n_higher, 1)), (s, 1, n_higher, d))

    r = Tensor(np.full((s, n_lower, n_higher, 1), 1.0 / n_higher, dtype=v.dtype))
    mu = act = None
    for it, lam in enumerate(_lambda_schedule(iterations)):
        # M-step
        r_w = mul(r, a_i_e)
        mass = clamp(tsum(r_w, axis=1, keepdims=True), lo=_MASS_EPS)  # (s,1,H,1)
        r_w_d = expand(r_w, (s, n_lower, n_higher, d))
        mass_d = expand(mass, (s, 1, n_higher, d))
        mu = div(tsum(mul(r_w_d, v), axis=1, keepdims=True), mass_d)  # (s,1,H,d)
        diff = sub(v, expand(mu, (s, n_lower, n_higher, d)))
        var = div(tsum(mul(r_w_d, mul(diff, diff)), axis=1, keepdims=True), mass_d)
        var = clamp(var, lo=var_floor)
        # description cost per dimension uses log(sigma) = log(var)/2
        cost = mul(add(beta_u, mul(log(var), 0.5)), mass_d)
        cost = tsum(cost, axis=3, keepdims=True)  # (s,1,H,1)
        act = sigmoid(mul(sub(beta_a, cost), lam))  # (s,1,H,1)

        if it < iterations - 1:
            # E-step: log responsibilities from Gaussian log-likelihood
            var_l = expand(var, (s, n_lower, n_higher, d))
            maha = tsum(div(mul(diff, diff), var_l), axis=3, keepdims=True)
            log_det = expand(
                tsum(log(var), axis=3, keepdims=True), (s, n_lower, n_higher, 1)
            )
            log_p = mul(add(maha, log_det), -0.5) - 0.5 * d * math.log(2 * math.pi)
            log_a = expand(log(clamp(act, lo=_ACT_EPS)), (s, n_lower, n_higher, 1))
            r = softmax(add(log_a, log_p), axis=2)
            if trace is not None:
                trace.append(r.data.reshape(lead + (n_lower, n_higher)).copy())

    out_poses = reshape(mu, (s, n_higher, d))
    out_poses = reshape(out_poses, lead + (n_higher, pr, pc))
    out_act = reshape(act, lead + (n_higher,))
    assignment = RoutingAssignment(r=reshape(r, lead + (n_lower, n_higher)))
    return CapsuleState(poses=out_poses, activations=out_act), assignment


# -- layer and fusion ------------------------------------------------------------


def project_to_capsules(f: Tensor, params: PwvParams) -> Tensor:
    """1x1 projection from decoder width to the primary-capsule channel count."""
    return conv2d(f, params.in_proj_w, bias=params.in_proj_b)


def pwv_layer(
    f_caps: Tensor, params: PwvParams, trace: list | None = None
) -> Tensor:
    """Primary capsules -> one routed capsule layer -> dense feature map.

    Input channels must equal T_lower*(pose_size+1); output channels are
    T_higher*(pose_size+1).
    """
    state = make_primary_capsules(f_caps, params.pose_shape, params.n_lower)
    votes = compute_votes(state, params.transform)
    routed, _ = em_routing(
        votes,
        state.activations,
        params.transform,
        iterations=params.iterations,
        trace=trace,
    )
    return capsules_to_map(routed)


def bottomup_fuse(feats: list[Tensor]) -> list[Tensor]:
    """Deep-to-shallow fusion: each level adds the upsampled deeper result.

    ``feats`` is ordered deepest first; the deepest level passes through.
    Returns the fused features in the same order.
    """
    if not feats:
        return []
    fused = [feats[0]]
    for f in feats[1:]:
        deeper = fused[-1]
        if deeper.shape[2:] != f.shape[2:]:
            deeper = resample(deeper, f.shape[2:], mode="bilinear")
        fused.append(add(f, deeper))
    return fused
