"""Bottleneck residual networks with optional SE / aggregated-SE gates.

Every parameter is initialized from its own generator seeded by
``(seed, crc32(name))``, so two architectures that share a parameter name
share its initial value. Gated and gate-free variants built from the same
seed therefore agree on every conv, BN and head weight.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .blocks import DEFAULT_CARDINALITY, DEFAULT_REDUCTION, SaEConfig, SaEParams, sae_forward
from .errors import ConfigError, DimensionError
from .layers import (
    BatchNormParams,
    Conv2dParams,
    batchnorm2d,
    conv2d,
    dense,
    global_avg_pool,
    maxpool2d,
)
from .tensor import Tensor, add, no_grad, relu

GateKind = Literal["none", "se", "sae"]

ARCHS = (
    "resnet50",
    "senet50",
    "senetv2_50",
    "resnext50",
    "senextv2_50",
    "tiny_resnet",
    "tiny_senetv2",
)

_GATES = {
    "resnet50": "none",
    "senet50": "se",
    "senetv2_50": "sae",
    "resnext50": "none",
    "senextv2_50": "sae",
    "tiny_resnet": "none",
    "tiny_senetv2": "sae",
}

EXPANSION = 4
RESNEXT_GROUPS = 32


@dataclass(frozen=True)
class ModelSpec:
    """Declarative architecture description.

    ``cardinality`` and ``groups`` default per family: SE uses one branch,
    the aggregated gate four; the ResNeXt family uses 32 conv groups with
    doubled bottleneck widths.
    """

    arch: str
    num_classes: int = 1000
    reduction: int = DEFAULT_REDUCTION
    cardinality: int | None = None
    groups: int | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; valid: {', '.join(ARCHS)}")
        if not isinstance(self.num_classes, (int, np.integer)) or self.num_classes < 1:
            raise ConfigError(f"num_classes must be a positive integer, got {self.num_classes!r}")
        if self.reduction < 1:
            raise ConfigError("reduction must be positive")
        gate = _GATES[self.arch]
        k = self.cardinality
        if gate == "se" and k not in (None, 1):
            raise ConfigError(f"{self.arch} uses a single-branch SE gate; cardinality must be 1")
        if k is not None and k < 1:
            raise ConfigError("cardinality must be positive")
        if not self.resnext_family and self.groups not in (None, 1):
            raise ConfigError(f"{self.arch} does not use grouped convolutions")
        if self.groups is not None and self.groups < 1:
            raise ConfigError("groups must be positive")
        for mid in self.mid_widths:
            if mid % self.conv_groups:
                raise ConfigError(f"bottleneck width {mid} not divisible by groups {self.conv_groups}")
        if gate != "none":
            for out in self.out_widths:
                SaEConfig(out, self.reduction, self.gate_cardinality)

    @property
    def gate(self) -> GateKind:
        return _GATES[self.arch]

    @property
    def gate_cardinality(self) -> int:
        if self.gate == "se":
            return 1
        return self.cardinality or DEFAULT_CARDINALITY

    @property
    def resnext_family(self) -> bool:
        return self.arch in ("resnext50", "senextv2_50")

    @property
    def tiny(self) -> bool:
        return self.arch.startswith("tiny_")

    @property
    def conv_groups(self) -> int:
        if self.resnext_family:
            return self.groups or RESNEXT_GROUPS
        return 1

    @property
    def blocks(self) -> tuple[int, ...]:
        return (1, 1, 1) if self.tiny else (3, 4, 6, 3)

    @property
    def out_widths(self) -> tuple[int, ...]:
        return (64, 128, 256) if self.tiny else (256, 512, 1024, 2048)

    @property
    def mid_widths(self) -> tuple[int, ...]:
        mids = tuple(w // EXPANSION for w in self.out_widths)
        return tuple(2 * m for m in mids) if self.resnext_family else mids

    @property
    def strides(self) -> tuple[int, ...]:
        return (1, 2, 2) if self.tiny else (1, 2, 2, 2)

    @property
    def stem_width(self) -> int:
        return 16 if self.tiny else 64

    def plain_counterpart(self) -> "ModelSpec":
        """Gate-free ResNet of equal depth used for parameter deltas."""
        return ModelSpec("tiny_resnet" if self.tiny else "resnet50", self.num_classes)

    def gate_config(self, channels: int) -> SaEConfig | None:
        if self.gate == "none":
            return None
        return SaEConfig(channels, self.reduction, self.gate_cardinality)


# ---------------------------------------------------------------------------
# parameter bookkeeping


@dataclass(frozen=True)
class _Slot:
    shape: tuple[int, ...]
    init: str  # he_normal | uniform | ones | zeros
    fan_in: int = 1
    buffer: bool = False


def _conv_slots(prefix, cin, cout, k, groups=1):
    return {f"{prefix}.weight": _Slot((cout, cin // groups, k, k), "he_normal", cin // groups * k * k)}


def _bn_slots(prefix, c):
    return {
        f"{prefix}.gamma": _Slot((c,), "ones"),
        f"{prefix}.beta": _Slot((c,), "zeros"),
        f"{prefix}.running_mean": _Slot((c,), "zeros", buffer=True),
        f"{prefix}.running_var": _Slot((c,), "ones", buffer=True),
    }


def _gate_slots(prefix, cfg: SaEConfig):
    c, red, k = cfg.channels, cfg.reduced, cfg.cardinality
    slots = {}
    for b in range(k):
        slots[f"{prefix}.branch{b}.weight"] = _Slot((red, c), "uniform", c)
        slots[f"{prefix}.branch{b}.bias"] = _Slot((red,), "uniform", c)
    slots[f"{prefix}.excite.weight"] = _Slot((c, k * red), "uniform", k * red)
    slots[f"{prefix}.excite.bias"] = _Slot((c,), "uniform", k * red)
    return slots


@dataclass(frozen=True)
class BlockPlan:
    name: str
    in_ch: int
    mid_ch: int
    out_ch: int
    stride: int
    groups: int
    gate: SaEConfig | None

    @property
    def projection(self) -> bool:
        return self.stride != 1 or self.in_ch != self.out_ch

    def slots(self) -> dict[str, _Slot]:
        n = self.name
        s = {}
        s |= _conv_slots(f"{n}.conv1", self.in_ch, self.mid_ch, 1)
        s |= _bn_slots(f"{n}.bn1", self.mid_ch)
        s |= _conv_slots(f"{n}.conv2", self.mid_ch, self.mid_ch, 3, self.groups)
        s |= _bn_slots(f"{n}.bn2", self.mid_ch)
        s |= _conv_slots(f"{n}.conv3", self.mid_ch, self.out_ch, 1)
        s |= _bn_slots(f"{n}.bn3", self.out_ch)
        if self.gate is not None:
            s |= _gate_slots(f"{n}.gate", self.gate)
        if self.projection:
            s |= _conv_slots(f"{n}.shortcut.conv", self.in_ch, self.out_ch, 1)
            s |= _bn_slots(f"{n}.shortcut.bn", self.out_ch)
        return s


def stage_plan(spec: ModelSpec) -> list[list[BlockPlan]]:
    stages = []
    in_ch = spec.stem_width
    for si, (nb, mid, out, stride) in enumerate(
        zip(spec.blocks, spec.mid_widths, spec.out_widths, spec.strides), start=1
    ):
        blocks = []
        for bi in range(nb):
            blocks.append(
                BlockPlan(
                    name=f"layer{si}.{bi}",
                    in_ch=in_ch,
                    mid_ch=mid,
                    out_ch=out,
                    stride=stride if bi == 0 else 1,
                    groups=spec.conv_groups,
                    gate=spec.gate_config(out),
                )
            )
            in_ch = out
        stages.append(blocks)
    return stages


def _model_slots(spec: ModelSpec) -> dict[str, _Slot]:
    k = 3 if spec.tiny else 7
    slots = _conv_slots("stem.conv", 3, spec.stem_width, k)
    slots |= _bn_slots("stem.bn", spec.stem_width)
    for stage in stage_plan(spec):
        for block in stage:
            slots |= block.slots()
    d = spec.out_widths[-1]
    slots["head.fc.weight"] = _Slot((d, spec.num_classes), "uniform", d)
    slots["head.fc.bias"] = _Slot((spec.num_classes,), "uniform", d)
    return slots


def _init_value(name: str, slot: _Slot, seed: int, dtype) -> np.ndarray:
    if slot.init == "ones":
        return np.ones(slot.shape, dtype)
    if slot.init == "zeros":
        return np.zeros(slot.shape, dtype)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])
    if slot.init == "he_normal":
        return (rng.standard_normal(slot.shape) * np.sqrt(2.0 / slot.fan_in)).astype(dtype)
    bound = 1.0 / np.sqrt(slot.fan_in)
    return rng.uniform(-bound, bound, slot.shape).astype(dtype)


class ModelInstance:
    """Materialized network: named parameters, BN buffers and a mode flag.

    Tensors are created lazily on first access, so counting parameters of a
    full-size network costs nothing.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.mode: Literal["train", "eval"] = "train"
        self.slots = _model_slots(spec)
        self.stages = stage_plan(spec)
        self._tensors: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        t = self._tensors.get(name)
        if t is None:
            slot = self.slots[name]
            t = Tensor(_init_value(name, slot, self.seed, self.dtype), requires_grad=not slot.buffer, name=name)
            self._tensors[name] = t
        return t

    def param_names(self) -> list[str]:
        return [n for n, s in self.slots.items() if not s.buffer]

    def buffer_names(self) -> list[str]:
        return [n for n, s in self.slots.items() if s.buffer]

    def parameters(self) -> dict[str, Tensor]:
        return {n: self[n] for n in self.param_names()}

    def buffers(self) -> dict[str, Tensor]:
        return {n: self[n] for n in self.buffer_names()}

    def train(self) -> "ModelInstance":
        self.mode = "train"
        return self

    def eval(self) -> "ModelInstance":
        self.mode = "eval"
        return self

    def to(self, dtype) -> "ModelInstance":
        """Cast every parameter and buffer in place (materializing them)."""
        self.dtype = np.dtype(dtype)
        for name in self.slots:
            t = self[name]
            t.data = t.data.astype(self.dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: self[n].data for n in self.slots}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [n for n in self.slots if n not in state]
        extra = [n for n in state if n not in self.slots]
        if missing or extra:
            raise ConfigError(
                f"checkpoint does not match {self.spec.arch}: "
                f"missing {missing[:3]}{'...' if len(missing) > 3 else ''}, "
                f"unexpected {extra[:3]}{'...' if len(extra) > 3 else ''}"
            )
        for n, arr in state.items():
            if tuple(arr.shape) != self.slots[n].shape:
                raise ConfigError(f"{n}: checkpoint shape {arr.shape} != model shape {self.slots[n].shape}")
        for n, arr in state.items():
            self[n].data = np.array(arr, dtype=self.dtype)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ModelInstance:
    if not isinstance(spec, ModelSpec):
        raise ConfigError(f"expected a ModelSpec, got {type(spec).__name__}")
    return ModelInstance(spec, seed, dtype)


# ---------------------------------------------------------------------------
# forward composition


@dataclass
class BottleneckParams:
    conv1: Conv2dParams
    bn1: BatchNormParams
    conv2: Conv2dParams
    bn2: BatchNormParams
    conv3: Conv2dParams
    bn3: BatchNormParams
    gate: SaEParams | None = None
    gate_cfg: SaEConfig | None = None
    shortcut: tuple[Conv2dParams, BatchNormParams] | None = None


def bottleneck_block(x: Tensor, p: BottleneckParams) -> Tensor:
    """relu(shortcut(x) + gate(bn3(conv3(relu(bn2(conv2(relu(bn1(conv1(x))))))))))."""
    h = relu(batchnorm2d(conv2d(x, p.conv1), p.bn1))
    h = relu(batchnorm2d(conv2d(h, p.conv2), p.bn2))
    h = batchnorm2d(conv2d(h, p.conv3), p.bn3)
    if p.gate is not None:
        h = sae_forward(h, p.gate, p.gate_cfg)
    if p.shortcut is None:
        sc = x
    else:
        sc = batchnorm2d(conv2d(x, p.shortcut[0]), p.shortcut[1])
    return relu(add(sc, h))


def _bn(m: ModelInstance, prefix: str) -> BatchNormParams:
    return BatchNormParams(
        m[f"{prefix}.gamma"], m[f"{prefix}.beta"],
        m[f"{prefix}.running_mean"], m[f"{prefix}.running_var"],
        mode=m.mode,
    )


def block_params(m: ModelInstance, b: BlockPlan) -> BottleneckParams:
    n = b.name
    gate = None
    if b.gate is not None:
        k = b.gate.cardinality
        gate = SaEParams(
            [m[f"{n}.gate.branch{i}.weight"] for i in range(k)],
            [m[f"{n}.gate.branch{i}.bias"] for i in range(k)],
            m[f"{n}.gate.excite.weight"],
            m[f"{n}.gate.excite.bias"],
        )
    shortcut = None
    if b.projection:
        shortcut = (Conv2dParams(m[f"{n}.shortcut.conv.weight"], stride=b.stride), _bn(m, f"{n}.shortcut.bn"))
    return BottleneckParams(
        conv1=Conv2dParams(m[f"{n}.conv1.weight"]),
        bn1=_bn(m, f"{n}.bn1"),
        conv2=Conv2dParams(m[f"{n}.conv2.weight"], stride=b.stride, padding=1, groups=b.groups),
        bn2=_bn(m, f"{n}.bn2"),
        conv3=Conv2dParams(m[f"{n}.conv3.weight"]),
        bn3=_bn(m, f"{n}.bn3"),
        gate=gate,
        gate_cfg=b.gate,
        shortcut=shortcut,
    )


def _stem(m: ModelInstance, x: Tensor) -> Tensor:
    if m.spec.tiny:
        h = conv2d(x, Conv2dParams(m["stem.conv.weight"], stride=1, padding=1))
        return relu(batchnorm2d(h, _bn(m, "stem.bn")))
    h = conv2d(x, Conv2dParams(m["stem.conv.weight"], stride=2, padding=3))
    h = relu(batchnorm2d(h, _bn(m, "stem.bn")))
    return maxpool2d(h, 3, 2, padding=1)


def features(m: ModelInstance, x) -> Tensor:
    """Stem and residual stages, returning the last feature map."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=m.dtype))
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"stem: expected N×3×H×W input, got {x.shape}")
    try:
        h = _stem(m, x)
    except DimensionError as exc:
        raise DimensionError(f"stem: {exc}") from exc
    for si, stage in enumerate(m.stages, start=1):
        try:
            for b in stage:
                h = bottleneck_block(h, block_params(m, b))
        except DimensionError as exc:
            raise DimensionError(f"layer{si}: {exc}") from exc
    return h


def forward(m: ModelInstance, x) -> Tensor:
    """Logits (N × num_classes)."""
    h = global_avg_pool(features(m, x))
    return dense(h, m["head.fc.weight"], m["head.fc.bias"])


def predict(m: ModelInstance, x, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits without recording a graph; restores the prior mode."""
    prev = m.mode
    m.eval()
    try:
        with no_grad():
            outs = [forward(m, x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
    finally:
        m.mode = prev
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# accounting


def count_params(m: ModelInstance | ModelSpec) -> int:
    """Exact number of trainable scalars (BN running buffers excluded)."""
    slots = m.slots if isinstance(m, ModelInstance) else _model_slots(m)
    return sum(int(np.prod(s.shape)) for s in slots.values() if not s.buffer)


def _section(name: str) -> str:
    if name.startswith("stem."):
        return "stem"
    if name.startswith("head."):
        return "head"
    if ".gate." in name:
        return "gates"
    return "stages"


@dataclass
class ParamBreakdown:
    total: int
    sections: dict[str, int]
    blocks: dict[str, int] = field(default_factory=dict)
    gates: dict[str, int] = field(default_factory=dict)


def param_breakdown(m: ModelInstance | ModelSpec) -> ParamBreakdown:
    """Counts per section (stem / stages / gates / head) and per block."""
    slots = m.slots if isinstance(m, ModelInstance) else _model_slots(m)
    sections = {"stem": 0, "stages": 0, "gates": 0, "head": 0}
    blocks: dict[str, int] = {}
    gates: dict[str, int] = {}
    for name, s in slots.items():
        if s.buffer:
            continue
        n = int(np.prod(s.shape))
        sections[_section(name)] += n
        if name.startswith("layer"):
            block = name.split(".gate.")[0] if ".gate." in name else ".".join(name.split(".")[:2])
            blocks[block] = blocks.get(block, 0) + n
            if ".gate." in name:
                gates[block] = gates.get(block, 0) + n
    return ParamBreakdown(sum(sections.values()), sections, blocks, gates)


def describe_stages(m: ModelInstance | ModelSpec) -> list[dict]:
    """Per-stage widths, groups, block count and gate FC widths read off the built slots."""
    spec = m.spec if isinstance(m, ModelInstance) else m
    slots = m.slots if isinstance(m, ModelInstance) else _model_slots(m)
    rows = []
    for si, stage in enumerate(stage_plan(spec), start=1):
        first = stage[0].name
        c1 = slots[f"{first}.conv1.weight"].shape
        c2 = slots[f"{first}.conv2.weight"].shape
        c3 = slots[f"{first}.conv3.weight"].shape
        row = {
            "conv1x1": c1[0],
            "conv3x3": c2[0],
            "groups": c1[0] // c2[1],
            "conv1x1_out": c3[0],
            "blocks": len(stage),
            "fc": None,
            "cardinality": 0,
        }
        k = sum(1 for n in slots if n.startswith(f"{first}.gate.branch") and n.endswith(".weight"))
        if k:
            reduced, channels = slots[f"{first}.gate.branch0.weight"].shape
            row["fc"] = [reduced, channels]
            row["cardinality"] = k
        rows.append(row)
    return rows


def with_classes(spec: ModelSpec, num_classes: int) -> ModelSpec:
    return replace(spec, num_classes=num_classes)
