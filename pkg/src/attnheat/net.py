"""Mini Inception-style CIFAR-10 classifier with a sharable attention module.

Layout (32 x 32 input)::

    stem 3x3 conv (16) -> block "early" (24) -> maxpool 2
                       -> block "middle" (32) -> maxpool 2
                       -> block "later" (48) -> global avg pool -> dense(10)

An attention module can be inserted right after one of the three blocks. It
runs one hourglass body (max-pool down ``depth`` times, 3x3 conv, nearest
upsample back, 3x3 conv) and branches K mask heads off it; head k works on
the body output pooled k more times and its mask is upsampled back, and the
K masks are averaged. Each head is conv1x1 -> relu -> conv1x1 -> sigmoid.
"""

from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, UsageError
from .rng import Rng
from .tensor import Tensor

TAPS = ("early", "middle", "later")
INPUT_SIZE = 32


class StagePlacement(str, enum.Enum):
    EARLY = "early"
    MIDDLE = "middle"
    LATER = "later"

    @property
    def block_index(self) -> int:
        return TAPS.index(self.value)


class MaskMode(str, enum.Enum):
    MULTIPLY = "multiply"
    RESIDUAL = "residual"


@dataclass(frozen=True)
class StemSpec:
    out_channels: int = 16
    kernel: int = 3


@dataclass(frozen=True)
class BlockSpec:
    """Widths of the four inception branches.

    ``w3`` is used for both the 1x1 reduction and the 3x3 conv of the second
    branch; ``w5pre``/``w5`` are the reduction and dilated-3x3 widths of the
    third branch.
    """

    name: str
    w1: int
    w3: int
    w5pre: int
    w5: int
    wpool: int

    @property
    def widths(self) -> tuple:
        return (self.w1, self.w3, self.w5pre, self.w5, self.wpool)

    @property
    def out_channels(self) -> int:
        return self.w1 + self.w3 + self.w5 + self.wpool


@dataclass(frozen=True)
class HourglassSpec:
    depth: int = 2
    body_channels: Optional[int] = None  # None -> same as the masked feature map


@dataclass(frozen=True)
class MaskHeadSpec:
    hidden: int = 8


@dataclass(frozen=True)
class AttentionModuleSpec:
    hourglass: HourglassSpec = HourglassSpec()
    heads: tuple = (MaskHeadSpec(),)
    mode: MaskMode = MaskMode.MULTIPLY
    spatial_only: bool = False
    channels: Optional[int] = None  # filled in by place_attention


DEFAULT_BLOCKS = (
    BlockSpec("early", 8, 8, 4, 4, 4),
    BlockSpec("middle", 8, 12, 4, 6, 6),
    BlockSpec("later", 16, 16, 8, 8, 8),
)


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 3
    num_classes: int = 10
    stem: StemSpec = StemSpec()
    blocks: tuple = DEFAULT_BLOCKS
    attention: Optional[AttentionModuleSpec] = None
    stage: Optional[StagePlacement] = None

    def block_in_channels(self) -> list:
        chans = [self.stem.out_channels]
        for blk in self.blocks[:-1]:
            chans.append(blk.out_channels)
        return chans

    def stage_size(self, stage: StagePlacement) -> int:
        return INPUT_SIZE // (2 ** stage.block_index)

    def validate(self) -> None:
        if len(self.blocks) != 3:
            raise ConfigError(f"expected exactly 3 blocks ({', '.join(TAPS)}), got {len(self.blocks)}")
        for blk, tap in zip(self.blocks, TAPS):
            if blk.name != tap:
                raise ConfigError(f"block {blk.name!r}: expected tap id {tap!r} in this position")
            if min(blk.widths) < 1:
                raise ConfigError(f"block {blk.name!r}: widths must be positive, got {blk.widths}")
        if self.stem.out_channels < 1 or self.stem.kernel < 1 or self.stem.kernel % 2 == 0:
            raise ConfigError(f"stem: need positive channels and an odd kernel, got {self.stem}")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigError("in_channels and num_classes must be positive")
        if (self.attention is None) != (self.stage is None):
            raise ConfigError("attention and stage must be given together")
        if self.attention is None:
            return
        attn = self.attention
        blk = self.blocks[self.stage.block_index]
        if attn.channels != blk.out_channels:
            raise ConfigError(f"block {blk.name!r}: outputs {blk.out_channels} channels but "
                              f"attention masks {attn.channels}")
        if not attn.heads:
            raise ConfigError("attention needs at least one mask head")
        if any(h.hidden < 1 for h in attn.heads):
            raise ConfigError("mask head hidden width must be positive")
        d = attn.hourglass.depth
        if d < 1 or (attn.hourglass.body_channels is not None and attn.hourglass.body_channels < 1):
            raise ConfigError(f"invalid hourglass spec {attn.hourglass}")
        size = self.stage_size(self.stage)
        extra = len(attn.heads) - 1
        if size % (2 ** (d + extra)) != 0:
            raise ConfigError(f"block {blk.name!r}: spatial size {size} not divisible by "
                              f"2^{d + extra} (hourglass depth {d}, {len(attn.heads)} heads)")

    # JSON round trip -------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "stem": {"out_channels": self.stem.out_channels, "kernel": self.stem.kernel},
            "blocks": [{"name": b.name, "widths": list(b.widths)} for b in self.blocks],
            "attention": None,
        }
        if self.attention is not None:
            a = self.attention
            d["attention"] = {
                "stage": self.stage.value,
                "hourglass": {"depth": a.hourglass.depth, "body_channels": a.hourglass.body_channels},
                "heads": [{"hidden": h.hidden} for h in a.heads],
                "mode": a.mode.value,
                "spatial_only": a.spatial_only,
                "channels": a.channels,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        _check_keys(d, {"in_channels", "num_classes", "stem", "blocks", "attention"}, "model")
        base = cls()
        stem = d.get("stem")
        if stem is not None:
            _check_keys(stem, {"out_channels", "kernel"}, "model.stem")
            stem = StemSpec(**stem)
        blocks = d.get("blocks")
        if blocks is not None:
            parsed = []
            for b in blocks:
                _check_keys(b, {"name", "widths"}, "model.blocks[]")
                if len(b["widths"]) != 5:
                    raise ConfigError(f"block {b.get('name')!r}: need 5 widths, got {b['widths']}")
                parsed.append(BlockSpec(b["name"], *(int(w) for w in b["widths"])))
            blocks = tuple(parsed)
        spec = cls(
            in_channels=int(d.get("in_channels", base.in_channels)),
            num_classes=int(d.get("num_classes", base.num_classes)),
            stem=stem or base.stem,
            blocks=blocks or base.blocks,
        )
        a = d.get("attention")
        if a is not None:
            _check_keys(a, {"stage", "hourglass", "heads", "mode", "spatial_only", "channels"},
                        "model.attention")
            hg = a.get("hourglass") or {}
            _check_keys(hg, {"depth", "body_channels"}, "model.attention.hourglass")
            heads = a.get("heads") or [{}]
            for h in heads:
                _check_keys(h, {"hidden"}, "model.attention.heads[]")
            attn = AttentionModuleSpec(
                hourglass=HourglassSpec(**hg),
                heads=tuple(MaskHeadSpec(**h) for h in heads),
                mode=_enum(MaskMode, a.get("mode", "multiply")),
                spatial_only=bool(a.get("spatial_only", False)),
            )
            stage = _enum(StagePlacement, a.get("stage", "early"))
            channels = a.get("channels")
            spec = place_attention(spec, stage, attn)
            if channels is not None and channels != spec.attention.channels:
                raise ConfigError(f"block {stage.value!r}: outputs {spec.attention.channels} "
                                  f"channels but attention.channels says {channels}")
        spec.validate()
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def _check_keys(d, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _enum(kind, value):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"invalid {kind.__name__} {value!r}; choose from "
                          f"{[m.value for m in kind]}") from None


def place_attention(spec: NetworkSpec, stage, attn: AttentionModuleSpec) -> NetworkSpec:
    """Insert ``attn`` right after the block named by ``stage``."""
    if spec.attention is not None:
        raise ConfigError(f"attention already placed at stage {spec.stage.value!r}")
    try:
        stage = StagePlacement(stage)
    except ValueError:
        raise ConfigError(f"stage must be one of {[s.value for s in StagePlacement]}, got {stage!r}") from None
    channels = spec.blocks[stage.block_index].out_channels
    placed = replace(spec, attention=replace(attn, channels=channels), stage=stage)
    placed.validate()
    return placed


# parameters ----------------------------------------------------------------

def _conv_shapes(prefix: str, cin: int, cout: int, k: int) -> list:
    return [(f"{prefix}.w", (cout, cin, k, k)), (f"{prefix}.b", (cout,))]


def block_param_shapes(prefix: str, cin: int, blk: BlockSpec) -> list:
    return (_conv_shapes(f"{prefix}.b1", cin, blk.w1, 1)
            + _conv_shapes(f"{prefix}.b3_reduce", cin, blk.w3, 1)
            + _conv_shapes(f"{prefix}.b3", blk.w3, blk.w3, 3)
            + _conv_shapes(f"{prefix}.b5_reduce", cin, blk.w5pre, 1)
            + _conv_shapes(f"{prefix}.b5", blk.w5pre, blk.w5, 3)
            + _conv_shapes(f"{prefix}.pool_proj", cin, blk.wpool, 1))


def hourglass_param_shapes(prefix: str, channels: int, hg: HourglassSpec) -> list:
    body = hg.body_channels or channels
    return (_conv_shapes(f"{prefix}.down", channels, body, 3)
            + _conv_shapes(f"{prefix}.up", body, channels, 3))


def mask_head_param_shapes(prefix: str, channels: int, head: MaskHeadSpec) -> list:
    return (_conv_shapes(f"{prefix}.fc1", channels, head.hidden, 1)
            + _conv_shapes(f"{prefix}.fc2", head.hidden, channels, 1))


def attention_param_shapes(attn: AttentionModuleSpec, prefix: str = "attn") -> list:
    shapes = hourglass_param_shapes(f"{prefix}.body", attn.channels, attn.hourglass)
    for k, head in enumerate(attn.heads):
        shapes += mask_head_param_shapes(f"{prefix}.head{k}", attn.channels, head)
    return shapes


def param_shapes(spec: NetworkSpec) -> list:
    shapes = _conv_shapes("stem", spec.in_channels, spec.stem.out_channels, spec.stem.kernel)
    for blk, cin in zip(spec.blocks, spec.block_in_channels()):
        shapes += block_param_shapes(blk.name, cin, blk)
        if spec.stage is not None and spec.stage.value == blk.name:
            shapes += attention_param_shapes(spec.attention)
    last = spec.blocks[-1].out_channels
    shapes += [("head.w", (last, spec.num_classes)), ("head.b", (spec.num_classes,))]
    return shapes


def init_param(name: str, shape: tuple, seed: int) -> np.ndarray:
    """He-uniform weights (fan-in scaled), zero biases.

    Each parameter draws from its own stream keyed by (seed, name), so adding
    or moving the attention module leaves every other parameter unchanged.
    """
    if name.endswith(".b"):
        return np.zeros(shape, dtype=np.float32)
    fan_in = shape[0] if name == "head.w" else int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    rng = Rng((seed * 0x100000001B3) ^ zlib.crc32(name.encode()))
    vals = rng.uniform_array(int(np.prod(shape)), -bound, bound)
    return vals.astype(np.float32).reshape(shape)


# forward pieces -------------------------------------------------------------

def _conv(x, p, prefix, pad=0, dilation=1):
    return ops.conv2d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], 1, pad, dilation)


def mini_inception_block(x: Tensor, params: dict, prefix: str) -> Tensor:
    """Four relu branches concatenated on channels; spatial size preserved.

    1x1 | 1x1 -> 3x3 | 1x1 -> 3x3 dilated 2 (stands in for 5x5) |
    3x3 max-pool (stride 1, pad 1) -> 1x1.
    """
    relu = ops.relu
    b1 = relu(_conv(x, params, f"{prefix}.b1"))
    b3 = relu(_conv(relu(_conv(x, params, f"{prefix}.b3_reduce")), params, f"{prefix}.b3", pad=1))
    b5 = relu(_conv(relu(_conv(x, params, f"{prefix}.b5_reduce")), params, f"{prefix}.b5",
                    pad=2, dilation=2))
    bp = relu(_conv(ops.pool2d(x, "max", 3, 1, 1), params, f"{prefix}.pool_proj"))
    return ops.concat_channels([b1, b3, b5, bp])


def hourglass_shared(x: Tensor, params: dict, prefix: str, depth: int = 2) -> Tensor:
    h, w = x.shape[2:]
    if h % (2 ** depth) or w % (2 ** depth):
        raise ConfigError(f"hourglass depth {depth} needs spatial size divisible by "
                          f"{2 ** depth}, got {h}x{w}")
    s = x
    for _ in range(depth):
        s = ops.pool2d(s, "max", 2)
    s = ops.relu(_conv(s, params, f"{prefix}.down", pad=1))
    s = ops.upsample(s, 2 ** depth, "nearest")
    return ops.relu(_conv(s, params, f"{prefix}.up", pad=1))


def mask_head(s: Tensor, params: dict, prefix: str, spatial_only: bool = False) -> Tensor:
    """conv1x1 -> relu -> conv1x1 -> sigmoid; mask has the shape of ``s``.

    The mask is kept strictly inside (0, 1) even where the sigmoid rounds
    to 0 or 1. With ``spatial_only`` the pre-sigmoid map is averaged over
    channels and the single spatial mask is repeated across all channels.
    """
    z = _conv(ops.relu(_conv(s, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")
    if spatial_only:
        c = z.shape[1]
        return ops.concat_channels([ops.open_unit(ops.sigmoid(ops.mean_channels(z)))] * c)
    return ops.open_unit(ops.sigmoid(z))


def apply_attention(f: Tensor, m: Tensor, mode) -> Tensor:
    if f.shape != m.shape:
        raise ShapeError(f"mask shape {m.shape} does not match feature shape {f.shape}")
    mode = MaskMode(mode)
    gated = ops.mul(m, f)
    if mode is MaskMode.MULTIPLY:
        return gated
    return ops.add(f, gated)


def attention_mask(f: Tensor, params: dict, attn: AttentionModuleSpec, prefix: str = "attn"):
    """Shared hourglass body plus K heads; returns (mask, per-head masks)."""
    body = hourglass_shared(f, params, f"{prefix}.body", attn.hourglass.depth)
    masks = []
    for k in range(len(attn.heads)):
        s = body
        for _ in range(k):
            s = ops.pool2d(s, "max", 2)
        m = mask_head(s, params, f"{prefix}.head{k}", attn.spatial_only)
        if k:
            m = ops.upsample(m, 2 ** k, "nearest")
        masks.append(m)
    if len(masks) == 1:
        return masks[0], masks
    total = masks[0]
    for m in masks[1:]:
        total = ops.add(total, m)
    return ops.mul(total, 1.0 / len(masks)), masks


@dataclass
class ActivationRecord:
    """Detached snapshots taken during a forward pass."""

    features: dict = field(default_factory=dict)
    stage: Optional[str] = None
    mask: Optional[np.ndarray] = None
    head_masks: list = field(default_factory=list)
    attended: Optional[np.ndarray] = None


class Network:
    def __init__(self, spec: NetworkSpec, params: dict):
        self.spec = spec
        self.params = params

    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: Tensor, taps=()) -> tuple:
        taps = set(taps)
        unknown = taps - set(TAPS)
        if unknown:
            raise UsageError(f"unknown tap ids {sorted(unknown)}; valid: {list(TAPS)}")
        spec, p = self.spec, self.params
        rec = ActivationRecord()
        h = ops.relu(ops.conv2d(x, p["stem.w"], p["stem.b"], 1, spec.stem.kernel // 2))
        for i, blk in enumerate(spec.blocks):
            if i:
                h = ops.pool2d(h, "max", 2)
            h = mini_inception_block(h, p, blk.name)
            if blk.name in taps:
                rec.features[blk.name] = h.data.copy()
            if spec.stage is not None and spec.stage.value == blk.name:
                m, heads = attention_mask(h, p, spec.attention)
                h = apply_attention(h, m, spec.attention.mode)
                if taps:
                    rec.stage = blk.name
                    rec.mask = m.data.copy()
                    rec.head_masks = [hm.data.copy() for hm in heads]
                    rec.attended = h.data.copy()
        logits = ops.dense(ops.global_avg_pool(h), p["head.w"], p["head.b"])
        return logits, rec

    __call__ = forward


def build_network(spec: NetworkSpec, seed: int) -> Network:
    spec.validate()
    params = {}
    for name, shape in param_shapes(spec):
        params[name] = Tensor(init_param(name, shape, seed), requires_grad=True, dtype=np.float32)
    return Network(spec, params)


def forward_with_taps(net: Network, batch: Tensor, taps=()) -> tuple:
    return net.forward(batch, taps)


def attention_param_count(attn: AttentionModuleSpec) -> int:
    return sum(int(np.prod(s)) for _, s in attention_param_shapes(attn))
