"""Declarative inverted-residual backbone specs and the strided temporal inflation transform.

A NetworkSpec is a validated, immutable-by-convention description of a 2D CNN:
a stem convolution, a chain of inverted-residual blocks and a single
classification head. Inflation rewrites selected pointwise convolutions to
carry a causal temporal kernel, optionally with a temporal stride, turning the
2D network into a streaming temporal one. Block indices are 0-based over
inverted-residual blocks only; the stem and head are not indexed.
"""
from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources as importlib_resources
from typing import Optional

from .errors import ConfigurationError, ConfigWarning, ContractError

SCHEMA_VERSION = 1


def _load_resource(name: str) -> dict:
    ref = importlib_resources.files("repstream.resources").joinpath(name)
    return json.loads(ref.read_text(encoding="utf-8"))


@dataclass
class InputContract:
    channels: int = 3
    height: int = 256
    width: int = 256
    fps: float = 16.0


@dataclass
class StemSpec:
    out_ch: int
    kernel: int = 3
    stride: int = 2


@dataclass
class BlockSpec:
    """One inverted-residual block: expand (pointwise), depthwise, project (pointwise).

    Blocks with expansion_ratio 1 have no expansion convolution and therefore
    cannot be inflated. expand_kt / project_kt of 1 mean the convolution is a
    plain per-frame one; a value of 3 gives it a causal temporal kernel.
    """

    index: int
    in_ch: int
    out_ch: int
    expansion_ratio: float = 6.0
    spatial_kernel: int = 3
    spatial_stride: int = 1
    skip: bool = False
    activation: str = "relu6"
    expand_kt: int = 1
    expand_tstride: int = 1
    project_kt: int = 1
    project_tstride: int = 1

    @property
    def hidden_ch(self) -> int:
        return int(round(self.in_ch * self.expansion_ratio))

    @property
    def has_expand(self) -> bool:
        return self.expansion_ratio != 1

    @property
    def temporal_stride_product(self) -> int:
        return self.expand_tstride * self.project_tstride


@dataclass
class HeadSpec:
    conv_ch: int
    num_classes: int
    mode: str = "clip_softmax"
    conv_kt: int = 1
    conv_tstride: int = 1


@dataclass
class NetworkSpec:
    input: InputContract
    stem: StemSpec
    blocks: list
    head: HeadSpec

    def validate(self) -> "NetworkSpec":
        if self.stem.kernel < 1 or self.stem.kernel % 2 == 0:
            raise ContractError(f"stem kernel must be odd, got {self.stem.kernel}")
        in_ch = self.stem.out_ch
        for pos, block in enumerate(self.blocks):
            if block.index != pos:
                raise ContractError(
                    f"block at position {pos} carries index {block.index}"
                )
            if block.in_ch != in_ch:
                raise ContractError(
                    f"channel chain break at block {pos}: expected in_ch {in_ch}, "
                    f"got {block.in_ch}"
                )
            if block.spatial_kernel < 1 or block.spatial_kernel % 2 == 0:
                raise ContractError(
                    f"block {pos}: spatial kernel must be odd, got {block.spatial_kernel}"
                )
            if block.spatial_stride not in (1, 2):
                raise ContractError(
                    f"block {pos}: spatial stride must be 1 or 2, got {block.spatial_stride}"
                )
            if block.expansion_ratio <= 0:
                raise ContractError(f"block {pos}: expansion ratio must be positive")
            if block.skip and (block.in_ch != block.out_ch or block.spatial_stride != 1):
                raise ContractError(
                    f"block {pos}: skip requires in_ch == out_ch and spatial stride 1"
                )
            for name in ("expand_kt", "project_kt"):
                kt = getattr(block, name)
                if kt < 1 or kt % 2 == 0:
                    raise ContractError(f"block {pos}: {name} must be odd, got {kt}")
            if block.expand_kt > 1 and not block.has_expand:
                raise ContractError(
                    f"block {pos}: cannot inflate, no pointwise expansion "
                    f"(expansion ratio 1)"
                )
            if block.expand_tstride < 1 or block.project_tstride < 1:
                raise ContractError(f"block {pos}: temporal strides must be positive")
            in_ch = block.out_ch
        if self.head.mode not in ("clip_softmax", "temporal"):
            raise ConfigurationError(f"unknown head mode {self.head.mode!r}")
        if self.head.num_classes < 2:
            raise ContractError(
                f"head num_classes must be >= 2, got {self.head.num_classes}"
            )
        if self.head.conv_kt < 1 or self.head.conv_kt % 2 == 0:
            raise ContractError(f"head conv_kt must be odd, got {self.head.conv_kt}")
        return self

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def temporal_stride_product(self) -> int:
        p = 1
        for b in self.blocks:
            p *= b.temporal_stride_product
        return p * self.head.conv_tstride

    def layer_ids(self) -> list:
        """Parameterized layers in execution order."""
        ids = ["stem.conv"]
        for b in self.blocks:
            if b.has_expand:
                ids.append(f"block{b.index}.expand")
            ids.append(f"block{b.index}.depthwise")
            ids.append(f"block{b.index}.project")
        ids.append("head.conv")
        ids.append("head.fc")
        return ids

    def pointwise_sites(self) -> list:
        """Pointwise convolution sites in execution order, as (owner, role) pairs."""
        sites = []
        for b in self.blocks:
            if b.has_expand:
                sites.append((b.index, "expand"))
            sites.append((b.index, "project"))
        sites.append(("head", "conv"))
        return sites

    def inflated_layer_ids(self) -> list:
        ids = []
        for b in self.blocks:
            if b.expand_kt > 1:
                ids.append(f"block{b.index}.expand")
            if b.project_kt > 1:
                ids.append(f"block{b.index}.project")
        if self.head.conv_kt > 1:
            ids.append("head.conv")
        return ids


@dataclass
class InflationTarget:
    block_index: int
    temporal_kernel: int = 3
    temporal_stride: int = 1


@dataclass
class InflationSpec:
    """Directives describing which pointwise convolutions become temporal.

    mode "by_block_index" inflates the expansion convolution of the listed
    blocks. mode "last_k_pointwise" inflates the last_k final pointwise
    convolutions of the network in execution order, applying temporal_stride
    at the 1-based strided_positions counted from the earliest inflated one.
    """

    mode: str = "by_block_index"
    targets: list = field(default_factory=list)
    last_k: int = 0
    strided_positions: tuple = ()
    temporal_kernel: int = 3
    temporal_stride: int = 2
    freeze_before_first: bool = False

    def validate(self, net: Optional[NetworkSpec] = None) -> "InflationSpec":
        if self.mode not in ("by_block_index", "last_k_pointwise"):
            raise ConfigurationError(f"unknown inflation mode {self.mode!r}")
        if self.mode == "by_block_index":
            indices = [t.block_index for t in self.targets]
            if any(b >= a for a, b in zip(indices[1:], indices)):
                raise ContractError(f"target indices must be strictly increasing: {indices}")
            for t in self.targets:
                if t.temporal_kernel < 1 or t.temporal_kernel % 2 == 0:
                    raise ContractError(
                        f"temporal kernel must be odd, got {t.temporal_kernel}"
                    )
                if t.temporal_stride < 1:
                    raise ContractError("temporal stride must be positive")
                if net is not None and not (0 <= t.block_index < net.num_blocks):
                    raise ContractError(
                        f"target block {t.block_index} outside network with "
                        f"{net.num_blocks} blocks"
                    )
        else:
            if self.last_k < 1:
                raise ContractError("last_k must be >= 1")
            if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
                raise ContractError(
                    f"temporal kernel must be odd, got {self.temporal_kernel}"
                )
            bad = [p for p in self.strided_positions if not (1 <= p <= self.last_k)]
            if bad:
                raise ContractError(
                    f"strided positions {bad} outside 1..{self.last_k}"
                )
            if net is not None and self.last_k > len(net.pointwise_sites()):
                raise ContractError(
                    f"last_k {self.last_k} exceeds the {len(net.pointwise_sites())} "
                    f"pointwise convolutions available"
                )
        return self


def inflate(net: NetworkSpec, spec: InflationSpec) -> NetworkSpec:
    """Return a copy of net with the inflation directives applied.

    Only pointwise convolutions gain temporal kernels; all other layers are
    untouched. An empty spec returns a semantically identical network.
    """
    spec.validate(net)
    out = copy.deepcopy(net)
    if spec.mode == "by_block_index":
        for t in spec.targets:
            block = out.blocks[t.block_index]
            if not block.has_expand:
                raise ContractError(
                    f"block {t.block_index}: cannot inflate, no pointwise expansion "
                    f"(expansion ratio 1)"
                )
            if t.temporal_kernel != 3:
                warnings.warn(
                    f"block {t.block_index}: recipe default temporal kernel is 3, "
                    f"got {t.temporal_kernel}",
                    ConfigWarning,
                )
            block.expand_kt = t.temporal_kernel
            block.expand_tstride = t.temporal_stride
    else:
        if spec.temporal_kernel != 3:
            warnings.warn(
                f"recipe default temporal kernel is 3, got {spec.temporal_kernel}",
                ConfigWarning,
            )
        sites = out.pointwise_sites()[-spec.last_k :]
        for pos, (owner, role) in enumerate(sites, start=1):
            stride = spec.temporal_stride if pos in set(spec.strided_positions) else 1
            if owner == "head":
                out.head.conv_kt = spec.temporal_kernel
                out.head.conv_tstride = stride
            else:
                block = out.blocks[owner]
                if role == "expand":
                    block.expand_kt = spec.temporal_kernel
                    block.expand_tstride = stride
                else:
                    block.project_kt = spec.temporal_kernel
                    block.project_tstride = stride
    return out.validate()


def trainability_mask(
    net: NetworkSpec,
    freeze_before_first: bool = False,
    last_k: Optional[int] = None,
) -> dict:
    """Per-layer trainability flags over the parameterized layers.

    freeze_before_first freezes every layer strictly before the first inflated
    convolution (a no-op on an uninflated network). last_k keeps only the k
    final parameterized layers trainable. Both constraints combine with AND.
    """
    ids = net.layer_ids()
    mask = {layer_id: True for layer_id in ids}
    if freeze_before_first:
        inflated = net.inflated_layer_ids()
        if inflated:
            first = ids.index(inflated[0])
            for layer_id in ids[:first]:
                mask[layer_id] = False
    if last_k is not None:
        if not (0 <= last_k <= len(ids)):
            raise ContractError(
                f"last_k {last_k} outside 0..{len(ids)} parameterized layers"
            )
        cutoff = len(ids) - last_k
        for layer_id in ids[:cutoff]:
            mask[layer_id] = False
    return mask


@dataclass
class TraceRow:
    layer_id: str
    kind: str
    in_ch: int
    out_ch: int
    in_h: int
    in_w: int
    out_h: int
    out_w: int
    kt: int
    kh: int
    kw: int
    groups: int
    spatial_stride: int
    temporal_stride: int
    cumulative_tstride: int
    effective_fps: float
    in_t: Optional[int] = None
    out_t: Optional[int] = None


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def shape_trace(net: NetworkSpec, fps: Optional[float] = None, T: Optional[int] = None) -> list:
    """Deterministic per-layer shape and rate report.

    Every parameterized layer appears once, with its spatial extents, temporal
    stride, cumulative temporal stride and effective execution rate at the
    given input fps (defaults to the input contract). When T is given, exact
    input/output temporal lengths are chained through the network.
    """
    net.validate()
    fps = net.input.fps if fps is None else fps
    h, w = net.input.height, net.input.width
    t = T
    cum = 1
    rows = []

    def add(layer_id, kind, in_ch, out_ch, in_h, in_w, kk, groups, s_stride, kt, t_stride):
        nonlocal h, w, t, cum
        out_h = _ceil_div(in_h, s_stride)
        out_w = _ceil_div(in_w, s_stride)
        cum *= t_stride
        in_t = t
        if t is not None:
            t = _ceil_div(t, t_stride)
        rows.append(
            TraceRow(
                layer_id=layer_id, kind=kind, in_ch=in_ch, out_ch=out_ch,
                in_h=in_h, in_w=in_w, out_h=out_h, out_w=out_w,
                kt=kt, kh=kk, kw=kk, groups=groups,
                spatial_stride=s_stride, temporal_stride=t_stride,
                cumulative_tstride=cum, effective_fps=fps / cum,
                in_t=in_t, out_t=t,
            )
        )
        h, w = out_h, out_w

    add("stem.conv", "stem", net.input.channels, net.stem.out_ch, h, w,
        net.stem.kernel, 1, net.stem.stride, 1, 1)
    for b in net.blocks:
        if b.has_expand:
            add(f"block{b.index}.expand", "expand", b.in_ch, b.hidden_ch, h, w,
                1, 1, 1, b.expand_kt, b.expand_tstride)
        add(f"block{b.index}.depthwise", "depthwise", b.hidden_ch, b.hidden_ch, h, w,
            b.spatial_kernel, b.hidden_ch, b.spatial_stride, 1, 1)
        add(f"block{b.index}.project", "project", b.hidden_ch, b.out_ch, h, w,
            1, 1, 1, b.project_kt, b.project_tstride)
    in_ch = net.blocks[-1].out_ch if net.blocks else net.stem.out_ch
    add("head.conv", "head_conv", in_ch, net.head.conv_ch, h, w,
        1, 1, 1, net.head.conv_kt, net.head.conv_tstride)
    add("head.fc", "fc", net.head.conv_ch, net.head.num_classes, 1, 1, 1, 1, 1, 1, 1)
    return rows


def build_reference_backbone(
    table: Optional[dict] = None, input_size: Optional[int] = None
) -> NetworkSpec:
    """Expand a backbone config table into a validated NetworkSpec.

    With no table the shipped reference table is used. input_size optionally
    overrides the square input resolution (the temporal semantics of the
    network do not depend on it).
    """
    if table is None:
        table = load_reference_table()
    inp = table["input"]
    size_h = input_size if input_size is not None else inp["height"]
    size_w = input_size if input_size is not None else inp["width"]
    contract = InputContract(inp["channels"], size_h, size_w, inp.get("fps", 16))
    stem_cfg = table["stem"]
    stem = StemSpec(stem_cfg["out_ch"], stem_cfg.get("kernel", 3), stem_cfg.get("stride", 2))
    blocks = []
    in_ch = stem.out_ch
    idx = 0
    for stage in table["stages"]:
        for rep in range(stage["repeats"]):
            stride = stage["stride"] if rep == 0 else 1
            out_ch = stage["out_ch"]
            blocks.append(
                BlockSpec(
                    index=idx,
                    in_ch=in_ch,
                    out_ch=out_ch,
                    expansion_ratio=stage["expansion"],
                    spatial_kernel=stage.get("kernel", 3),
                    spatial_stride=stride,
                    skip=(stride == 1 and in_ch == out_ch),
                )
            )
            in_ch = out_ch
            idx += 1
    head_cfg = table["head"]
    head = HeadSpec(
        conv_ch=head_cfg["conv_ch"],
        num_classes=head_cfg["num_classes"],
        mode=head_cfg.get("mode", "clip_softmax"),
    )
    return NetworkSpec(contract, stem, blocks, head).validate()


def load_reference_table() -> dict:
    return _load_resource("reference_backbone.json")


def reference_inflation() -> InflationSpec:
    """The shipped strided-inflation recipe for the reference backbone."""
    cfg = _load_resource("reference_inflation.json")
    targets = [
        InflationTarget(t["block_index"], t["temporal_kernel"], t["temporal_stride"])
        for t in cfg["targets"]
    ]
    return InflationSpec(
        mode=cfg["mode"],
        targets=targets,
        freeze_before_first=cfg.get("freeze_before_first", False),
    ).validate()


def network_spec_to_json(net: NetworkSpec) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "input": asdict(net.input),
        "stem": asdict(net.stem),
        "blocks": [asdict(b) for b in net.blocks],
        "head": asdict(net.head),
    }
    return json.dumps(doc, indent=2)


def network_spec_from_json(text: str) -> NetworkSpec:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(
            f"unsupported network spec schema {doc.get('schema_version')!r}"
        )
    return NetworkSpec(
        input=InputContract(**doc["input"]),
        stem=StemSpec(**doc["stem"]),
        blocks=[BlockSpec(**b) for b in doc["blocks"]],
        head=HeadSpec(**doc["head"]),
    ).validate()


def inflation_spec_to_json(spec: InflationSpec) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "mode": spec.mode,
        "targets": [asdict(t) for t in spec.targets],
        "last_k": spec.last_k,
        "strided_positions": list(spec.strided_positions),
        "temporal_kernel": spec.temporal_kernel,
        "temporal_stride": spec.temporal_stride,
        "freeze_before_first": spec.freeze_before_first,
    }
    return json.dumps(doc, indent=2)


def inflation_spec_from_json(text: str) -> InflationSpec:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(
            f"unsupported inflation spec schema {doc.get('schema_version')!r}"
        )
    return InflationSpec(
        mode=doc["mode"],
        targets=[InflationTarget(**t) for t in doc["targets"]],
        last_k=doc.get("last_k", 0),
        strided_positions=tuple(doc.get("strided_positions", ())),
        temporal_kernel=doc.get("temporal_kernel", 3),
        temporal_stride=doc.get("temporal_stride", 2),
        freeze_before_first=doc.get("freeze_before_first", False),
    ).validate()
