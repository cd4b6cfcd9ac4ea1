"""Parameterized network runtime: whole-clip execution and frame-by-frame streaming.

The streaming path keeps, per temporally inflated convolution, a ring buffer
of the last kt - 1 activations it has seen (zeros after reset, which realizes
the causal padding) and a phase counter per temporally strided convolution.
A strided convolution fires on its first input and every s-th one after that,
so the whole network emits outputs at input indices 0, S, 2S, ... where S is
the product of all temporal strides. Frame-by-frame and whole-clip execution
perform the same multiply-accumulate sums in the same order and are therefore
numerically interchangeable.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import netspec as ns
from .errors import ConfigurationError, ContractError, NumericError
from .tensor import (
    ConvWeights,
    TensorND,
    classify_head,
    conv_forward,
    conv_backward,
    relu6,
    relu6_grad,
    softmax,
    temporal_out_size,
)


@dataclass
class ConvLayer:
    layer_id: str
    weights: ConvWeights
    activation: Optional[str] = "relu6"

    @property
    def kt(self) -> int:
        return self.weights.kt

    @property
    def temporal_stride(self) -> int:
        return self.weights.temporal_stride

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = conv_forward(x, self.weights)
        if self.activation == "relu6":
            y = relu6(y)
        return y


@dataclass
class LinearLayer:
    layer_id: str
    weight: np.ndarray  # (num_classes, in_features)
    bias: np.ndarray


@dataclass
class RtBlock:
    index: int
    expand: Optional[ConvLayer]
    depthwise: ConvLayer
    project: ConvLayer
    skip: bool

    @property
    def temporal_stride(self) -> int:
        s = self.depthwise.temporal_stride * self.project.temporal_stride
        if self.expand is not None:
            s *= self.expand.temporal_stride
        return s

    def convs(self):
        out = [] if self.expand is None else [self.expand]
        return out + [self.depthwise, self.project]


class Network:
    """A NetworkSpec bound to concrete parameters."""

    def __init__(self, spec: ns.NetworkSpec, stem, blocks, head_conv, head_fc, dtype):
        self.spec = spec
        self.stem = stem
        self.blocks = blocks
        self.head_conv = head_conv
        self.head_fc = head_fc
        self.dtype = np.dtype(dtype)

    # ------------------------------------------------------------------ build

    @classmethod
    def build(cls, spec: ns.NetworkSpec, seed: int = 0, dtype=np.float32) -> "Network":
        """Instantiate the network with deterministic random parameters."""
        spec.validate()
        dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        def conv(layer_id, out_ch, in_ch, kt, kh, kw, groups, s_stride, t_stride,
                 activation):
            fan_in = (in_ch // groups) * kt * kh * kw
            kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                (out_ch, in_ch // groups, kt, kh, kw)).astype(dtype)
            bias = rng.normal(0.0, 0.05, out_ch).astype(dtype)
            return ConvLayer(
                layer_id,
                ConvWeights(kernel, bias, groups, (s_stride, s_stride), t_stride, "same"),
                activation,
            )

        stem = conv("stem.conv", spec.stem.out_ch, spec.input.channels, 1,
                    spec.stem.kernel, spec.stem.kernel, 1, spec.stem.stride, 1, "relu6")
        blocks = []
        for b in spec.blocks:
            expand = None
            if b.has_expand:
                expand = conv(f"block{b.index}.expand", b.hidden_ch, b.in_ch,
                              b.expand_kt, 1, 1, 1, 1, b.expand_tstride, "relu6")
            depthwise = conv(f"block{b.index}.depthwise", b.hidden_ch, b.hidden_ch,
                             1, b.spatial_kernel, b.spatial_kernel, b.hidden_ch,
                             b.spatial_stride, 1, "relu6")
            project = conv(f"block{b.index}.project", b.out_ch, b.hidden_ch,
                           b.project_kt, 1, 1, 1, 1, b.project_tstride, None)
            blocks.append(RtBlock(b.index, expand, depthwise, project, b.skip))
        in_ch = spec.blocks[-1].out_ch if spec.blocks else spec.stem.out_ch
        head_conv = conv("head.conv", spec.head.conv_ch, in_ch, spec.head.conv_kt,
                         1, 1, 1, 1, spec.head.conv_tstride, "relu6")
        weight = rng.normal(0.0, np.sqrt(1.0 / spec.head.conv_ch),
                            (spec.head.num_classes, spec.head.conv_ch)).astype(dtype)
        bias = rng.normal(0.0, 0.05, spec.head.num_classes).astype(dtype)
        head_fc = LinearLayer("head.fc", weight, bias)
        return cls(spec, stem, blocks, head_conv, head_fc, dtype)

    # ------------------------------------------------------------- inspection

    def conv_layers(self) -> list:
        layers = [self.stem]
        for b in self.blocks:
            layers.extend(b.convs())
        layers.append(self.head_conv)
        return layers

    def layer_ids(self) -> list:
        return self.spec.layer_ids()

    def param_count(self) -> int:
        n = 0
        for layer in self.conv_layers():
            n += layer.weights.kernel.size
            if layer.weights.bias is not None:
                n += layer.weights.bias.size
        n += self.head_fc.weight.size + self.head_fc.bias.size
        return n

    def get_params(self) -> dict:
        params = {}
        for layer in self.conv_layers():
            params[layer.layer_id] = {
                "kernel": layer.weights.kernel.copy(),
                "bias": layer.weights.bias.copy(),
            }
        params["head.fc"] = {
            "weight": self.head_fc.weight.copy(),
            "bias": self.head_fc.bias.copy(),
        }
        return params

    def set_params(self, params: dict) -> None:
        for layer in self.conv_layers():
            entry = params[layer.layer_id]
            if entry["kernel"].shape != layer.weights.kernel.shape:
                raise ContractError(
                    f"{layer.layer_id}: kernel shape {entry['kernel'].shape} does not "
                    f"match {layer.weights.kernel.shape}"
                )
            layer.weights.kernel = entry["kernel"].astype(self.dtype)
            layer.weights.bias = entry["bias"].astype(self.dtype)
        entry = params["head.fc"]
        self.head_fc.weight = entry["weight"].astype(self.dtype)
        self.head_fc.bias = entry["bias"].astype(self.dtype)

    @property
    def temporal_stride_product(self) -> int:
        return self.spec.temporal_stride_product

    def clone(self) -> "Network":
        other = Network.build(self.spec, seed=0, dtype=self.dtype)
        other.set_params(self.get_params())
        return other

    # ---------------------------------------------------------------- offline

    def _check_clip(self, clip: np.ndarray) -> np.ndarray:
        clip = np.asarray(clip)
        if clip.ndim != 4:
            raise ContractError(f"expected clip (C, T, H, W), got rank {clip.ndim}")
        c = self.spec.input.channels
        if clip.shape[0] != c:
            raise ContractError(
                f"axis C: clip has {clip.shape[0]} channels, contract expects {c}"
            )
        if clip.shape[1] == 0:
            raise ContractError("axis T: clip must be non-empty")
        if not np.all(np.isfinite(clip)):
            raise NumericError("non-finite clip values")
        return clip.astype(self.dtype, copy=False)

    def forward_features(self, clip: np.ndarray) -> np.ndarray:
        """Whole-clip execution up to the head convolution output (C', T', h, w)."""
        x = self._check_clip(clip)
        x = self.stem.forward(x)
        for block in self.blocks:
            x = self._block_forward(block, x)
        return self.head_conv.forward(x)

    def _block_forward(self, block: RtBlock, x: np.ndarray) -> np.ndarray:
        h = x
        for conv in block.convs():
            h = conv.forward(h)
        if block.skip:
            h = h + x[:, :: block.temporal_stride]
        return h

    def forward_steps(self, clip: np.ndarray) -> np.ndarray:
        """Per-output-step class distributions, shape (T', num_classes)."""
        feats = self.forward_features(clip)
        return classify_head(
            TensorND(feats, "CTHW"), self.head_fc.weight, self.head_fc.bias, "temporal"
        )

    def classify_clip(self, clip: np.ndarray) -> np.ndarray:
        """Single clip-level distribution (global average pooling head)."""
        feats = self.forward_features(clip)
        return classify_head(
            TensorND(feats, "CTHW"), self.head_fc.weight, self.head_fc.bias,
            "clip_softmax",
        )

    # --------------------------------------------------------------- training

    def forward_train(self, clip: np.ndarray):
        """Forward pass recording the activations needed for the backward pass.

        Returns (per-step probabilities, tape). The tape is consumed by
        backward_from_dlogits.
        """
        tape = []
        x = self._check_clip(clip)
        x = self._conv_train(self.stem, x, tape)
        for block in self.blocks:
            x = self._block_train(block, x, tape)
        x = self._conv_train(self.head_conv, x, tape)
        hw = x.shape[2] * x.shape[3]
        pooled = x.mean(axis=(2, 3), dtype=np.float64).T  # (T', C)
        logits = pooled @ self.head_fc.weight.T.astype(np.float64) + self.head_fc.bias.astype(np.float64)
        probs = softmax(logits, axis=-1, context="head.fc")
        tape.append(("head", x.shape, hw, pooled))
        return probs, tape

    def _conv_train(self, layer: ConvLayer, x: np.ndarray, tape: list) -> np.ndarray:
        pre = conv_forward(x, layer.weights)
        tape.append(("conv", layer, x, pre))
        return relu6(pre) if layer.activation == "relu6" else pre

    def _block_train(self, block: RtBlock, x: np.ndarray, tape: list) -> np.ndarray:
        mark = len(tape)
        h = x
        for conv in block.convs():
            h = self._conv_train(conv, h, tape)
        if block.skip:
            h = h + x[:, :: block.temporal_stride]
            tape.append(("skip", block, x.shape, mark))
        return h

    def backward_from_dlogits(self, tape: list, dlogits: np.ndarray, trainable) -> dict:
        """Backpropagate, returning float64 gradients for the trainable layers.

        trainable is a set of layer ids; gradients of other layers are not
        reported (their parameters stay fixed) but activation gradients still
        flow through them.
        """
        trainable = set(trainable)
        grads = {}
        kind, feat_shape, hw, pooled = tape[-1]
        assert kind == "head"
        if "head.fc" in trainable:
            grads["head.fc"] = {
                "weight": dlogits.T @ pooled,
                "bias": dlogits.sum(axis=0),
            }
        dpooled = dlogits @ self.head_fc.weight.astype(np.float64)  # (T', C)
        dx = np.broadcast_to(
            dpooled.T[:, :, None, None] / hw, feat_shape
        ).astype(np.float64)

        i = len(tape) - 2
        pending_skip = None  # (block, in_shape) awaiting its projector gradient
        while i >= 0:
            entry = tape[i]
            if entry[0] == "skip":
                _, block, in_shape, mark = entry
                pending_skip = (block, in_shape, dx)
            elif entry[0] == "conv":
                _, layer, x_in, pre = entry
                dy = relu6_grad(pre, dx) if layer.activation == "relu6" else dx
                dx, dk, db = conv_backward(x_in, layer.weights, dy)
                if layer.layer_id in trainable:
                    grads[layer.layer_id] = {"kernel": dk, "bias": db}
                if pending_skip is not None and layer.layer_id.endswith(".expand"):
                    dx = self._add_skip_grad(dx, pending_skip)
                    pending_skip = None
                elif pending_skip is not None and layer.layer_id.endswith(".depthwise"):
                    # block without expansion conv: depthwise is the first conv
                    block = pending_skip[0]
                    if block.expand is None:
                        dx = self._add_skip_grad(dx, pending_skip)
                        pending_skip = None
            i -= 1
        return grads

    @staticmethod
    def _add_skip_grad(dx: np.ndarray, pending) -> np.ndarray:
        block, in_shape, dout = pending
        stride = block.temporal_stride
        if stride == 1 and dx.shape == dout.shape:
            return dx + dout
        full = np.zeros(in_shape, dtype=np.float64)
        full[:, :: stride] = dout
        return dx + full

    # -------------------------------------------------------------- inflation

    def inflated(self, spec: ns.InflationSpec, init: str = "identity_tap") -> "Network":
        """Apply an inflation spec, transferring the current parameters.

        init "identity_tap" puts the 2D kernel at the newest temporal tap and
        zeros elsewhere, which preserves the 2D behavior at temporal stride 1.
        init "averaged" spreads the 2D kernel uniformly over the taps.
        """
        if init not in ("identity_tap", "averaged"):
            raise ConfigurationError(f"unknown inflation init {init!r}")
        new_spec = ns.inflate(self.spec, spec)
        out = Network.build(new_spec, seed=0, dtype=self.dtype)
        params = self.get_params()
        new_params = out.get_params()
        for layer_id, entry in new_params.items():
            src = params[layer_id]
            for key, arr in entry.items():
                if src[key].shape == arr.shape:
                    entry[key] = src[key].copy()
                else:
                    old, new = src[key], np.zeros_like(arr)
                    kt = new.shape[2]
                    if init == "identity_tap":
                        new[:, :, kt - 1] = old[:, :, 0]
                    else:
                        for tap in range(kt):
                            new[:, :, tap] = old[:, :, 0] / kt
                    entry[key] = new.astype(self.dtype)
        out.set_params(new_params)
        return out


# ----------------------------------------------------------------- streaming


@dataclass
class StreamOutput:
    frame_index: int
    step_index: int
    probabilities: np.ndarray


class StreamSession:
    """Mutable per-stream state for frame-by-frame execution of one network.

    Not safe for concurrent pushes; run one session per stream. Sessions can
    be reset (returning to the causal zero-history state) and cloned for
    checkpointing.
    """

    def __init__(self, net: Network):
        self.net = net
        self.frames_consumed = 0
        self.outputs_emitted = 0
        self.exec_counts = {lid: 0 for lid in net.layer_ids()}
        self._state = {}
        for layer in net.conv_layers():
            if layer.kt > 1 or layer.temporal_stride > 1:
                self._state[layer.layer_id] = {
                    "buffer": [None] * (layer.kt - 1),
                    "phase": 0,
                }
        self._closed = False

    @property
    def ring_buffer_count(self) -> int:
        return sum(1 for layer in self.net.conv_layers() if layer.kt > 1)

    def reset(self) -> None:
        self.frames_consumed = 0
        self.outputs_emitted = 0
        self.exec_counts = {lid: 0 for lid in self.net.layer_ids()}
        for state in self._state.values():
            state["buffer"] = [None] * len(state["buffer"])
            state["phase"] = 0
        self._closed = False

    def close(self) -> None:
        self._closed = True

    def clone(self) -> "StreamSession":
        other = StreamSession(self.net)
        other.frames_consumed = self.frames_consumed
        other.outputs_emitted = self.outputs_emitted
        other.exec_counts = dict(self.exec_counts)
        other._state = {
            lid: {
                "buffer": [None if b is None else b.copy() for b in st["buffer"]],
                "phase": st["phase"],
            }
            for lid, st in self._state.items()
        }
        return other

    # one frame through one convolution; None when the stride phase holds fire
    def _conv_step(self, layer: ConvLayer, x: np.ndarray) -> Optional[np.ndarray]:
        state = self._state.get(layer.layer_id)
        if state is None:
            y = conv_forward(x[:, None], layer.weights)[:, 0]
        else:
            fire = state["phase"] == 0
            state["phase"] = (state["phase"] + 1) % layer.temporal_stride
            if layer.kt > 1:
                window = [
                    np.zeros_like(x) if b is None else b for b in state["buffer"]
                ] + [x]
                state["buffer"] = state["buffer"][1:] + [x]
                if not fire:
                    return None
                stacked = np.stack(window, axis=1)
                y = conv_forward(stacked, layer.weights, temporal_pad=False)[:, 0]
            else:
                if not fire:
                    return None
                y = conv_forward(x[:, None], layer.weights)[:, 0]
        self.exec_counts[layer.layer_id] += 1
        if layer.activation == "relu6":
            y = relu6(y)
        return y

    def push_frame(self, frame: np.ndarray) -> Optional[StreamOutput]:
        """Feed one frame; returns an output exactly when the stride phase fires."""
        if self._closed:
            raise ContractError("session is closed; call reset() or open a new one")
        frame = np.asarray(frame)
        contract = self.net.spec.input
        expected = (contract.channels, contract.height, contract.width)
        if frame.shape != expected:
            raise ContractError(
                f"frame shape {frame.shape} does not match input contract "
                f"(C, H, W) = {expected}"
            )
        if not np.all(np.isfinite(frame)):
            raise NumericError(
                f"non-finite pixel values at frame {self.frames_consumed}"
            )
        frame_index = self.frames_consumed
        self.frames_consumed += 1

        x = frame.astype(self.net.dtype, copy=False)
        x = self._conv_step(self.net.stem, x)
        if x is None:
            return None
        for block in self.net.blocks:
            x_in = x
            for conv in block.convs():
                x = self._conv_step(conv, x)
                if x is None:
                    return None
            if block.skip:
                x = x + x_in
        x = self._conv_step(self.net.head_conv, x)
        if x is None:
            return None
        probs = classify_head(
            TensorND(x[:, None], "CTHW"),
            self.net.head_fc.weight,
            self.net.head_fc.bias,
            "temporal",
        )[0]
        self.exec_counts["head.fc"] += 1
        out = StreamOutput(frame_index, self.outputs_emitted, probs)
        self.outputs_emitted += 1
        return out


def open_session(net: Network) -> StreamSession:
    """Create a stream session in the reset (zero history) state."""
    if not isinstance(net, Network):
        raise ConfigurationError("open_session expects a built Network")
    return StreamSession(net)


@dataclass
class OfflineRun:
    probabilities: np.ndarray  # (T', num_classes)
    step_frame_indices: np.ndarray
    exec_counts: dict


def run_offline(net: Network, clip) -> OfflineRun:
    """Whole-clip execution, step for step equivalent to streaming the frames.

    Accepts a (C, T, H, W) array or a TensorND with axes CTHW.
    """
    if isinstance(clip, TensorND):
        if clip.axes != "CTHW":
            raise ContractError(f"run_offline expects axes CTHW, got {clip.axes!r}")
        clip = clip.data
    probs = net.forward_steps(clip)
    stride = net.temporal_stride_product
    steps = probs.shape[0]
    counts = {}
    rows = ns.shape_trace(net.spec, T=clip.shape[1])
    for row in rows:
        counts[row.layer_id] = row.out_t
    return OfflineRun(probs, np.arange(steps) * stride, counts)


def stream_clip(net: Network, clip: np.ndarray):
    """Push every frame of a clip through a fresh session.

    Returns (probabilities (T', K), frame indices, session) for comparison
    against run_offline.
    """
    session = open_session(net)
    probs, indices = [], []
    for t in range(clip.shape[1]):
        out = session.push_frame(clip[:, t])
        if out is not None:
            probs.append(out.probabilities)
            indices.append(out.frame_index)
    stacked = np.stack(probs) if probs else np.zeros((0, net.spec.head.num_classes))
    return stacked, np.asarray(indices), session
