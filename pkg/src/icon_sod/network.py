"""Full saliency network: backbone stub + DFA + ICE + PWV + heads.

The encoder is a small random-init five-stage CNN (stand-in for a
pretrained backbone); stages 1..4 at strides 4/8/16/32 feed the decoder.
Each level runs diverse aggregation, then shared-parameter channel
enhancement over adjacent-level fusions, then the deepest three levels go
through capsule part-whole verification on a common grid and are fused
bottom-up.  Five supervised heads emit logit maps at input resolution:
one per pyramid level plus one from the dot product of the shallowest
verified and enhanced features, which also yields the final prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import dfa as dfa_mod
from . import ice as ice_mod
from . import pwv as pwv_mod
from .errors import ConfigError, DimensionError
from .nn import ConvBlockParams, block_forward, conv2d, make_conv_block, resample
from .nn import load_arrays_into, named_arrays
from .serialize import load_container, save_container
from .tensor import Tensor, mul, no_grad, sigmoid

ROUTING_STRATEGIES = ("em", "dynamic", "self")  # only "em" is implemented
ATTENTION_KINDS = ("ice", "se", "cbam", "gct")  # only "ice" is implemented


@dataclass
class IconConfig:
    """Structural hyperparameters; see the README for the text file schema."""

    input_size: int = 352
    backbone_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    decoder_width: int = 64
    branch_width: int = 64
    atrous_rate: int = 2
    dfa_branches: tuple[str, ...] = ("asy", "atr", "ori")
    ice_ratio: int = 4
    pose_shape: tuple[int, int] = (4, 4)
    lower_types: int = 8
    higher_types: int = 8
    capsule_grid: int = 0  # 0 -> input_size // 16 (22 at 352)
    routing_iterations: int = 3
    routing_strategy: str = "em"
    attention_kind: str = "ice"
    pwv_levels: tuple[int, ...] = (2, 3, 4)
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.input_size % 32 != 0 or self.input_size < 32:
            raise ConfigError(
                f"input_size must be a positive multiple of 32, got {self.input_size}"
            )
        if len(self.backbone_widths) != 5:
            raise ConfigError("backbone_widths needs exactly 5 stages")
        if self.routing_strategy not in ROUTING_STRATEGIES:
            raise ConfigError(f"unknown routing strategy {self.routing_strategy!r}")
        if self.routing_strategy != "em":
            raise ConfigError(
                f"routing strategy {self.routing_strategy!r} is a documented hook; "
                "only 'em' is implemented"
            )
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.attention_kind!r}")
        if self.attention_kind != "ice":
            raise ConfigError(
                f"attention kind {self.attention_kind!r} is a documented hook; "
                "only 'ice' is implemented"
            )
        if any(l not in (1, 2, 3, 4) for l in self.pwv_levels) or not self.pwv_levels:
            raise ConfigError("pwv_levels must be a nonempty subset of 1..4")
        if tuple(sorted(self.pwv_levels)) != tuple(self.pwv_levels):
            raise ConfigError("pwv_levels must be ascending")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def grid(self) -> int:
        return self.capsule_grid if self.capsule_grid > 0 else self.input_size // 16

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    @classmethod
    def desk(cls, input_size: int = 64, **overrides) -> "IconConfig":
        """Small configuration for desk-scale runs and tests."""
        return cls(input_size=input_size, **overrides)

    # -- plain-text key/value form ------------------------------------
    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "IconConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name].strip()
            if f.name in ("backbone_widths", "pose_shape", "pwv_levels"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x.strip())
            elif f.name == "dfa_branches":
                kwargs[f.name] = tuple(x.strip() for x in raw.split(",") if x.strip())
            elif f.name in ("routing_strategy", "attention_kind", "dtype"):
                kwargs[f.name] = raw
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def format_kv(kv: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in kv.items())


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse the ``key = value`` config format ('#' starts a comment)."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, val = stripped.split("=", 1)
        out[key.strip()] = val.strip()
    return out


@dataclass
class HeadParams:
    weight: Tensor
    bias: Tensor


@dataclass
class IconParams:
    backbone: list[ConvBlockParams]
    dfa: list[dfa_mod.DfaParams]
    ice: ice_mod.IceParams  # single shared record for every call site
    pwv: list[pwv_mod.PwvParams]
    heads: list[HeadParams] = field(default_factory=list)


@dataclass
class PredictionSet:
    """Side logits (one per supervised head, input resolution) + final map.

    Head order: levels 1..4 of the verified pyramid, then the fused
    (verified x enhanced, level 1) head.  ``final`` is the sigmoid of the
    fused head.
    """

    side_logits: list[Tensor]
    final: Tensor


def init_params(config: IconConfig, seed: int = 0) -> IconParams:
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    widths = config.backbone_widths

    backbone = []
    c_prev = 3
    for w in widths:
        backbone.append(make_conv_block(rng, c_prev, w, stride=2, dtype=dt))
        backbone.append(make_conv_block(rng, w, w, stride=1, dtype=dt))
        c_prev = w

    dfa_params = [
        dfa_mod.make_dfa_params(
            rng,
            widths[level],
            config.branch_width,
            config.decoder_width,
            level=level,
            kinds=config.dfa_branches,
            atrous_rate=config.atrous_rate,
            dtype=dt,
        )
        for level in (1, 2, 3, 4)
    ]

    c_fuse = 3 * config.decoder_width
    ice_params = ice_mod.make_ice_params(
        rng, c_fuse, config.decoder_width, ratio=config.ice_ratio, dtype=dt
    )

    pwv_params = [
        pwv_mod.make_pwv_params(
            rng,
            config.decoder_width,
            pose_shape=config.pose_shape,
            n_lower=config.lower_types,
            n_higher=config.higher_types,
            iterations=config.routing_iterations,
            dtype=dt,
        )
        for _ in config.pwv_levels
    ]

    heads = []
    for _ in range(5):
        std = np.sqrt(2.0 / config.decoder_width)
        heads.append(
            HeadParams(
                weight=Tensor(
                    rng.normal(0, std, (1, config.decoder_width, 1, 1)).astype(dt),
                    requires_grad=True,
                ),
                bias=Tensor(np.zeros(1, dtype=dt), requires_grad=True),
            )
        )
    return IconParams(
        backbone=backbone, dfa=dfa_params, ice=ice_params, pwv=pwv_params, heads=heads
    )


def backbone_stub(image: Tensor, params: IconParams, config: IconConfig, training: bool = False):
    """Five strided stages; returns levels 1..4 (strides 4, 8, 16, 32)."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected (B, 3, H, W) image, got {image.shape}")
    h, w = image.shape[2:]
    if h % 32 != 0 or w % 32 != 0:
        raise ConfigError(f"input resolution {h}x{w} is not divisible by 32")
    x = image
    feats = []
    for stage in range(5):
        x = block_forward(x, params.backbone[2 * stage], training)
        x = block_forward(x, params.backbone[2 * stage + 1], training)
        feats.append(x)
    return feats[1:]


def _head(x: Tensor, head: HeadParams, out_hw) -> Tensor:
    logits = conv2d(x, head.weight, bias=head.bias)
    if logits.shape[2:] != tuple(out_hw):
        logits = resample(logits, out_hw, mode="bilinear")
    return logits


def icon_forward(
    image: Tensor,
    params: IconParams,
    config: IconConfig,
    training: bool = False,
    heatmap_dir=None,
) -> PredictionSet:
    """Run the full graph; returns five side logits and the final map.

    ``heatmap_dir`` dumps per-level pre/post-enhancement channel heatmaps
    as grayscale PNGs (debug aid).
    """
    out_hw = image.shape[2:]
    bkb = backbone_stub(image, params, config, training)

    dfa_feats = [
        dfa_mod.dfa_level(f, p, training) for f, p in zip(bkb, params.dfa)
    ]

    ice_feats = []
    for i, cur in enumerate(dfa_feats):
        prev = dfa_feats[i - 1] if i > 0 else None
        nxt = dfa_feats[i + 1] if i < len(dfa_feats) - 1 else None
        fused = ice_mod.fuse_adjacent(cur, prev=prev, nxt=nxt)
        if heatmap_dir is not None:
            ice_mod.dump_channel_heatmap(fused, f"{heatmap_dir}/pre_ice_level{i + 1}.png")
        enhanced = ice_mod.ice_forward(fused, params.ice, training)
        if heatmap_dir is not None:
            ice_mod.dump_channel_heatmap(enhanced, f"{heatmap_dir}/post_ice_level{i + 1}.png")
        ice_feats.append(enhanced)

    grid = config.grid
    caps_feats = {}
    for level, p in zip(config.pwv_levels, params.pwv):
        src = ice_feats[level - 1]
        if src.shape[2] >= grid and src.shape[3] >= grid:
            reduced = pwv_mod.reduce_to_grid(src, grid)
        else:
            # deeper levels can sit below the grid; bring them up bilinearly
            reduced = resample(src, (grid, grid), mode="bilinear")
        caps_in = pwv_mod.project_to_capsules(reduced, p)
        caps_map = pwv_mod.pwv_layer(caps_in, p)
        dense = block_forward(caps_map, p.out_block, training)
        caps_feats[level] = resample(dense, src.shape[2:], mode="bilinear")

    deep_to_shallow = [caps_feats[level] for level in sorted(caps_feats, reverse=True)]
    fused_feats = pwv_mod.bottomup_fuse(deep_to_shallow)
    pwv_feats = {
        level: feat
        for level, feat in zip(sorted(caps_feats, reverse=True), fused_feats)
    }
    for level in (4, 3, 2, 1):
        if level not in pwv_feats:
            # levels outside the capsule set join by resampling the nearest fusion
            nearest = pwv_feats[min(pwv_feats, key=lambda k: abs(k - level))]
            pwv_feats[level] = resample(
                nearest, ice_feats[level - 1].shape[2:], mode="bilinear"
            )

    side = [
        _head(pwv_feats[level], params.heads[level - 1], out_hw) for level in (1, 2, 3, 4)
    ]
    fused_extra = mul(pwv_feats[1], ice_feats[0])
    side.append(_head(fused_extra, params.heads[4], out_hw))

    return PredictionSet(side_logits=side, final=sigmoid(side[-1]))


def infer(
    image: Tensor,
    params: IconParams,
    config: IconConfig,
    threshold: float | None = None,
) -> np.ndarray:
    """Saliency map in [0, 1] (binary when ``threshold`` is given)."""
    with no_grad():
        pred = icon_forward(image, params, config, training=False)
        out = pred.final.data
    if threshold is not None:
        out = (out >= threshold).astype(out.dtype)
    return out


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: IconParams, config: IconConfig, extra_meta: dict | None = None) -> None:
    arrays = {name: arr for name, arr, _ in named_arrays(params)}
    meta = {"kind": "icon-sod", "config": config.to_kv()}
    if extra_meta:
        meta.update(extra_meta)
    save_container(path, arrays, meta=meta)


def load_checkpoint(path) -> tuple[IconParams, IconConfig, dict]:
    arrays, meta = load_container(path)
    if meta.get("kind") != "icon-sod":
        raise ValueError(f"{path}: not an icon-sod checkpoint")
    config = IconConfig.from_kv(meta["config"])
    params = init_params(config, seed=0)
    load_arrays_into(params, arrays)
    return params, config, meta
