"""Shared test oracles and random-network generators.

The naive convolution here is the independent reference: it gathers the
window for every output element and multiplies it against the kernel tap by
tap, counting every multiply it performs (including multiplies against
causal or spatial zero padding, which the fast path performs as well).
"""
from __future__ import annotations

import numpy as np

from repstream import netspec as ns
from repstream.runtime import Network
from repstream.tensor import ConvWeights


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def _pad_amounts(size, k, stride, padding):
    if padding == "valid":
        return 0, 0
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def naive_conv(x: np.ndarray, w: ConvWeights):
    """Direct convolution; returns (y float64, number of multiplies performed)."""
    C, T, H, W = x.shape
    O, Ig, kt, kh, kw = w.kernel.shape
    g = w.groups
    st = w.temporal_stride
    sh, sw = w.spatial_stride
    ph = _pad_amounts(H, kh, sh, w.spatial_padding)
    pw = _pad_amounts(W, kw, sw, w.spatial_padding)
    xp = np.pad(x.astype(np.float64), ((0, 0), (kt - 1, 0), ph, pw))
    oT = -(-T // st)
    oH = (H + ph[0] + ph[1] - kh) // sh + 1
    oW = (W + pw[0] + pw[1] - kw) // sw + 1
    y = np.zeros((O, oT, oH, oW))
    macs = 0
    og = O // g
    kern = w.kernel.astype(np.float64)
    for o in range(O):
        grp = o // og
        cs = grp * Ig
        for t in range(oT):
            for i in range(oH):
                for j in range(oW):
                    window = xp[
                        cs : cs + Ig,
                        t * st : t * st + kt,
                        i * sh : i * sh + kh,
                        j * sw : j * sw + kw,
                    ]
                    prod = window * kern[o]
                    macs += prod.size
                    val = prod.sum()
                    if w.bias is not None:
                        val += float(w.bias[o])
                    y[o, t, i, j] = val
    return y, macs


def naive_network_forward(net: Network, clip: np.ndarray):
    """Reference forward pass; returns (per-step probabilities, per-layer MACs)."""
    counts = {}

    def run(layer, x):
        y, m = naive_conv(x, layer.weights)
        counts[layer.layer_id] = m
        y = y.astype(net.dtype)
        if layer.activation == "relu6":
            y = np.minimum(np.maximum(y, 0), net.dtype.type(6))
        return y

    x = clip.astype(net.dtype)
    x = run(net.stem, x)
    for block in net.blocks:
        x_in = x
        for conv in block.convs():
            x = run(conv, x)
        if block.skip:
            x = x + x_in[:, :: block.temporal_stride]
    x = run(net.head_conv, x)
    pooled = x.mean(axis=(2, 3), dtype=np.float64).T
    w64 = net.head_fc.weight.astype(np.float64)
    logits = pooled @ w64.T + net.head_fc.bias.astype(np.float64)
    counts["head.fc"] = logits.shape[0] * w64.size
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), counts


def make_random_spec(rng: np.random.Generator) -> ns.NetworkSpec:
    """Small random inverted-residual network, possibly inflated."""
    channels = [int(rng.integers(2, 5))]
    n_blocks = int(rng.integers(1, 4))
    size = int(rng.choice([6, 8, 10]))
    stem = ns.StemSpec(channels[0], 3, int(rng.choice([1, 2])))
    blocks = []
    in_ch = channels[0]
    for i in range(n_blocks):
        out_ch = int(rng.integers(2, 6))
        stride = int(rng.choice([1, 2])) if i == 0 else 1
        expansion = float(rng.choice([1.0, 2.0, 3.0]))
        skip = stride == 1 and in_ch == out_ch and bool(rng.integers(0, 2))
        blocks.append(
            ns.BlockSpec(
                index=i,
                in_ch=in_ch,
                out_ch=out_ch,
                expansion_ratio=expansion,
                spatial_kernel=int(rng.choice([1, 3])),
                spatial_stride=stride,
                skip=skip,
            )
        )
        in_ch = out_ch
    head = ns.HeadSpec(int(rng.integers(3, 7)), int(rng.integers(2, 5)), "temporal")
    spec = ns.NetworkSpec(
        ns.InputContract(3, size, size, 16.0), stem, blocks, head
    ).validate()

    roll = rng.integers(0, 3)
    if roll == 0:
        return spec  # uninflated
    if roll == 1:
        targets = []
        for b in spec.blocks:
            if b.has_expand and rng.integers(0, 2):
                targets.append(
                    ns.InflationTarget(b.index, 3, int(rng.choice([1, 2])))
                )
        ispec = ns.InflationSpec(mode="by_block_index", targets=targets)
    else:
        n_sites = len(spec.pointwise_sites())
        k = int(rng.integers(1, n_sites + 1))
        strided = tuple(
            int(p) for p in rng.choice(np.arange(1, k + 1), size=min(k, 2), replace=False)
            if rng.integers(0, 2)
        )
        ispec = ns.InflationSpec(
            mode="last_k_pointwise", last_k=k, strided_positions=strided
        )
    return ns.inflate(spec, ispec)


def make_random_net(rng: np.random.Generator, dtype=np.float32) -> Network:
    spec = make_random_spec(rng)
    return Network.build(spec, seed=int(rng.integers(0, 2**31)), dtype=dtype)


def random_clip(rng: np.random.Generator, spec: ns.NetworkSpec, T: int) -> np.ndarray:
    return rng.random(
        (spec.input.channels, T, spec.input.height, spec.input.width)
    ).astype(np.float32)
