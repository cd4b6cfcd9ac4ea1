"""Dense tensors with tagged axes and the convolution kernels behind the runtime.

Every kernel accumulates in float64 regardless of the storage dtype, and the
per-output-element summation order is identical between whole-clip and
frame-by-frame execution, so the two modes round the same way.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, NumericError

AXIS_ORDER = "NCTHW"

# im2col buffers larger than this are processed in temporal slices
_COL_BYTES_LIMIT = 1 << 27


@dataclass(frozen=True)
class TensorND:
    """Dense array with semantic axis tags drawn from N, C, T, H, W."""

    data: np.ndarray
    axes: str

    def __post_init__(self):
        arr = np.asarray(self.data)
        object.__setattr__(self, "data", arr)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ContractError(f"dtype must be float32 or float64, got {arr.dtype}")
        if len(self.axes) != arr.ndim:
            raise ContractError(
                f"axes {self.axes!r} do not match array of rank {arr.ndim}"
            )
        if len(set(self.axes)) != len(self.axes):
            raise ContractError(f"axis tags must be unique, got {self.axes!r}")
        unknown = set(self.axes) - set(AXIS_ORDER)
        if unknown:
            raise ContractError(f"unknown axis tags {sorted(unknown)}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def axis(self, tag: str) -> int:
        if tag not in self.axes:
            raise ContractError(f"tensor has axes {self.axes!r}, no {tag!r} axis")
        return self.axes.index(tag)

    def extent(self, tag: str) -> int:
        return self.data.shape[self.axis(tag)]


@dataclass
class ConvWeights:
    """Grouped convolution weights with an optional temporal kernel.

    kernel has shape (out_ch, in_ch // groups, kt, kh, kw). Temporal padding
    is always causal: kt - 1 zero frames of history are assumed before the
    first input frame, so output step t' only sees input indices
    <= temporal_stride * t'.
    """

    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    groups: int = 1
    spatial_stride: tuple = (1, 1)
    temporal_stride: int = 1
    spatial_padding: str = "same"

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        if self.kernel.ndim != 5:
            raise ContractError(
                f"kernel must be 5D (out, in/groups, kt, kh, kw), got rank {self.kernel.ndim}"
            )
        out_ch = self.kernel.shape[0]
        if self.groups < 1 or out_ch % self.groups:
            raise ContractError(
                f"out_ch {out_ch} not divisible by groups {self.groups}"
            )
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (out_ch,):
                raise ContractError(
                    f"bias shape {self.bias.shape} does not match out_ch {out_ch}"
                )
        sh, sw = self.spatial_stride
        if sh < 1 or sw < 1 or self.temporal_stride < 1:
            raise ContractError("strides must be positive")
        if self.spatial_padding not in ("same", "valid"):
            raise ContractError(f"unknown spatial padding {self.spatial_padding!r}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def kt(self) -> int:
        return self.kernel.shape[2]

    @property
    def kh(self) -> int:
        return self.kernel.shape[3]

    @property
    def kw(self) -> int:
        return self.kernel.shape[4]


def _same_pad(size: int, k: int, stride: int):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def spatial_out_size(size: int, k: int, stride: int, padding: str, axis: str = "H") -> int:
    if padding == "same":
        return -(-size // stride)
    if size < k:
        raise ContractError(
            f"axis {axis}: extent {size} smaller than kernel {k} with valid padding"
        )
    return (size - k) // stride + 1


def temporal_out_size(t: int, stride: int) -> int:
    """Output length of a causally padded temporal convolution."""
    return -(-t // stride)


def conv_forward(x: np.ndarray, w: ConvWeights, temporal_pad: bool = True) -> np.ndarray:
    """Run a grouped convolution over (T, H, W) axes of x (shape C, T, H, W).

    With temporal_pad the input is causally padded with kt - 1 zero frames and
    strided, yielding ceil(T / temporal_stride) steps aligned to input indices
    0, s, 2s, ... Without it the caller supplies exactly kt frames of history
    and a single output step is produced (the streaming path).
    """
    if x.ndim != 4:
        raise ContractError(f"expected (C, T, H, W) input, got rank {x.ndim}")
    C, T, H, W = x.shape
    O, Ig, kt, kh, kw = w.kernel.shape
    g = w.groups
    if C != Ig * g:
        raise ContractError(
            f"axis C: input has {C} channels, weights expect {Ig * g} (groups={g})"
        )
    st = w.temporal_stride
    sh, sw = w.spatial_stride
    oH = spatial_out_size(H, kh, sh, w.spatial_padding, "H")
    oW = spatial_out_size(W, kw, sw, w.spatial_padding, "W")
    if T == 0:
        return np.zeros((O, 0, oH, oW), dtype=x.dtype)
    if not temporal_pad and T != kt:
        raise ContractError(f"streaming window must supply exactly kt={kt} frames, got {T}")

    if w.spatial_padding == "same":
        ph = _same_pad(H, kh, sh)
        pw = _same_pad(W, kw, sw)
    else:
        ph = pw = (0, 0)
    tpad = kt - 1 if temporal_pad else 0
    if tpad or ph != (0, 0) or pw != (0, 0):
        xp = np.pad(x, ((0, 0), (tpad, 0), ph, pw))
    else:
        xp = x
    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))[:, ::st, ::sh, ::sw]
    oT = win.shape[1]
    assert win.shape[2] == oH and win.shape[3] == oW

    kern = w.kernel.reshape(g, O // g, Ig * kt * kh * kw).astype(np.float64, copy=False)
    bias = None if w.bias is None else w.bias.astype(np.float64)

    # (C, oT, oH, oW, kt, kh, kw) -> (C, kt, kh, kw, oT, oH, oW)
    win = win.transpose(0, 4, 5, 6, 1, 2, 3)
    n_spatial = oH * oW
    col_bytes = C * kt * kh * kw * oT * n_spatial * 8
    chunk = oT if col_bytes <= _COL_BYTES_LIMIT else max(1, int(oT * _COL_BYTES_LIMIT / col_bytes))

    y = np.empty((O, oT, oH, oW), dtype=x.dtype)
    for t0 in range(0, oT, chunk):
        t1 = min(t0 + chunk, oT)
        cols = np.asarray(win[:, :, :, :, t0:t1], dtype=np.float64)
        cols = cols.reshape(g, Ig * kt * kh * kw, (t1 - t0) * n_spatial)
        out = np.matmul(kern, cols)
        if bias is not None:
            out += bias.reshape(g, O // g, 1)
        y[:, t0:t1] = out.reshape(O, t1 - t0, oH, oW).astype(x.dtype, copy=False)
    return y


def conv_backward(x: np.ndarray, w: ConvWeights, dy: np.ndarray):
    """Gradients of conv_forward with respect to input, kernel and bias.

    dy has the pre-activation output shape (out_ch, oT, oH, oW). Returns
    (dx, dkernel, dbias) in float64; dbias is None when the layer has no bias.
    """
    C, T, H, W = x.shape
    O, Ig, kt, kh, kw = w.kernel.shape
    g = w.groups
    st = w.temporal_stride
    sh, sw = w.spatial_stride
    oT, oH, oW = dy.shape[1:]

    if w.spatial_padding == "same":
        ph = _same_pad(H, kh, sh)
        pw = _same_pad(W, kw, sw)
    else:
        ph = pw = (0, 0)
    tpad = kt - 1
    xp = np.pad(x, ((0, 0), (tpad, 0), ph, pw)).astype(np.float64, copy=False)
    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))[:, ::st, ::sh, ::sw]
    win = win.transpose(0, 4, 5, 6, 1, 2, 3)  # (C, kt, kh, kw, oT, oH, oW)

    n = oT * oH * oW
    dyg = dy.reshape(g, O // g, n).astype(np.float64, copy=False)
    cols = np.ascontiguousarray(win).reshape(g, Ig * kt * kh * kw, n)
    dkernel = np.matmul(dyg, cols.transpose(0, 2, 1)).reshape(O, Ig, kt, kh, kw)
    dbias = None if w.bias is None else dy.sum(axis=(1, 2, 3), dtype=np.float64)

    kern = w.kernel.reshape(g, O // g, Ig, kt, kh, kw).astype(np.float64, copy=False)
    dxp = np.zeros(xp.shape, dtype=np.float64)
    dy5 = dy.reshape(g, O // g, oT, oH, oW).astype(np.float64, copy=False)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                tap = kern[:, :, :, a, b, c]  # (g, Og, Ig)
                contrib = np.einsum("goi,gothw->githw", tap, dy5)
                contrib = contrib.reshape(C, oT, oH, oW)
                dxp[
                    :,
                    a : a + st * oT : st,
                    b : b + sh * oH : sh,
                    c : c + sw * oW : sw,
                ] += contrib
    dx = dxp[:, tpad:, ph[0] : ph[0] + H, pw[0] : pw[0] + W]
    return dx, dkernel, dbias


def relu6(x: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(x, 0), x.dtype.type(6))


def relu6_grad(pre: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * ((pre > 0) & (pre < 6))


def softmax(logits: np.ndarray, axis: int = -1, context: str = "logits") -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {context}")
    z = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class BatchNormParams:
    """Per-channel inference-time normalization statistics."""

    scale: np.ndarray
    shift: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5


def fold_batchnorm(w: ConvWeights, bn: BatchNormParams) -> ConvWeights:
    """Fold conv -> batchnorm into a single ConvWeights with identical output."""
    out = w.out_channels
    for name in ("scale", "shift", "mean", "var"):
        arr = np.asarray(getattr(bn, name), dtype=np.float64)
        if arr.shape != (out,):
            raise ContractError(f"bn {name} shape {arr.shape} does not match out_ch {out}")
    denom = np.asarray(bn.var, dtype=np.float64) + bn.eps
    if np.any(denom <= 0):
        raise NumericError("var + eps must be strictly positive")
    factor = np.asarray(bn.scale, dtype=np.float64) / np.sqrt(denom)
    kernel = (w.kernel.astype(np.float64) * factor[:, None, None, None, None]).astype(
        w.kernel.dtype
    )
    base = 0.0 if w.bias is None else w.bias.astype(np.float64)
    bias = ((base - np.asarray(bn.mean, dtype=np.float64)) * factor + bn.shift).astype(
        w.kernel.dtype
    )
    return replace(w, kernel=kernel, bias=bias)


def _apply_conv(inp: TensorND, w: ConvWeights) -> TensorND:
    axes = inp.axes
    if axes == "CTHW":
        return TensorND(conv_forward(inp.data, w), "CTHW")
    if axes == "NCTHW":
        out = np.stack([conv_forward(sample, w) for sample in inp.data])
        return TensorND(out, "NCTHW")
    raise ContractError(f"convolution expects axes CTHW or NCTHW, got {axes!r}")


def conv2d(inp: TensorND, w: ConvWeights) -> TensorND:
    """Per-timestep 2D convolution (temporal kernel must be 1)."""
    if w.kt != 1:
        raise ContractError(
            f"conv2d requires kt=1, got kt={w.kt}; use temporal_pointwise_conv"
        )
    return _apply_conv(inp, w)


def temporal_pointwise_conv(inp: TensorND, w: ConvWeights) -> TensorND:
    """Causal temporal convolution applied pointwise over space (kh = kw = 1)."""
    if w.kh != 1 or w.kw != 1:
        raise ContractError(f"temporal pointwise conv requires kh=kw=1, got {w.kh}x{w.kw}")
    if w.temporal_stride not in (1, 2):
        raise ContractError(f"temporal stride must be 1 or 2, got {w.temporal_stride}")
    return _apply_conv(inp, w)


def classify_head(
    features: TensorND,
    weight: np.ndarray,
    bias: np.ndarray,
    mode: str,
    layer_id: str = "head.fc",
) -> np.ndarray:
    """Pool features and apply a linear softmax head.

    Mode "clip_softmax" pools over T, H and W and yields one distribution;
    mode "temporal" pools over H and W only and yields one distribution per
    timestep. Leading N, if present, is preserved.
    """
    if mode not in ("clip_softmax", "temporal"):
        raise ConfigurationError(f"unknown head mode {mode!r}")
    weight = np.asarray(weight)
    num_classes = weight.shape[0]
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    if weight.shape[1] != features.extent("C"):
        raise ContractError(
            f"axis C: head expects {weight.shape[1]} channels, features have "
            f"{features.extent('C')}"
        )
    pool_tags = "THW" if mode == "clip_softmax" else "HW"
    pool_axes = tuple(features.axis(t) for t in pool_tags if t in features.axes)
    if mode == "temporal" and "T" not in features.axes:
        raise ContractError("temporal head requires a T axis")
    pooled = features.data.mean(axis=pool_axes, dtype=np.float64)
    # move C to the trailing axis for the matmul
    remaining = [t for t in features.axes if t not in pool_tags]
    pooled = np.moveaxis(pooled, remaining.index("C"), -1)
    logits = pooled @ weight.T.astype(np.float64) + np.asarray(bias, dtype=np.float64)
    return softmax(logits, axis=-1, context=layer_id)


_MAGIC = b"NDT1"


def save_tensor(path, t: TensorND) -> None:
    """Write a tensor as a little-endian binary container with a JSON header."""
    header = {"dtype": str(t.dtype), "axes": t.axes, "shape": list(t.shape)}
    blob = json.dumps(header).encode("utf-8")
    le_dtype = "<f4" if t.dtype == np.float32 else "<f8"
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(t.data, dtype=le_dtype).tobytes())


def load_tensor(path) -> TensorND:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ContractError(f"bad tensor container magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        le_dtype = "<f4" if header["dtype"] == "float32" else "<f8"
        data = np.frombuffer(f.read(), dtype=le_dtype).reshape(header["shape"])
    return TensorND(data.astype(header["dtype"]), header["axes"])
