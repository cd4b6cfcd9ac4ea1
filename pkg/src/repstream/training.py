"""Toy-scale supervised training of the temporal head and last-k layers.

The backward pass is hand-written per layer type (spatial, pointwise,
depthwise and temporal convolutions, plus the linear head) and verified
against central finite differences. Training consumes temporally
concatenated batches; by default the causal temporal state is NOT reset at
video boundaries, matching the concatenation semantics (a reset option
exists for ablation).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import netspec as ns
from .counting import EventTrack, Event, FrameLabelSeq, decode_count, densify, mape
from .datasets import BatchConcat, batch_concat_temporal
from .errors import ConfigurationError, ContractError, DataWarning, NumericError
from .runtime import Network

_PROB_EPS = 1e-12


@dataclass
class LossSpec:
    """Per-class weights for the temporal classification cost.

    The majority "within" class of schemes 1 and 2 is down-weighted to 0.2 by
    default; scheme 3 is balanced so all classes weigh 1.
    """

    class_weights: np.ndarray

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if self.class_weights.ndim != 1 or np.any(self.class_weights <= 0):
            raise ContractError("class weights must be a vector of positives")


def default_loss_spec(scheme: int) -> LossSpec:
    if scheme == 1:
        return LossSpec(np.array([0.2, 1.0]))
    if scheme == 2:
        return LossSpec(np.array([0.2, 1.0, 1.0]))
    if scheme == 3:
        return LossSpec(np.array([1.0, 1.0]))
    raise ConfigurationError(f"unknown scheme {scheme}")


def weighted_temporal_cross_entropy(probs: np.ndarray, labels: np.ndarray, spec: LossSpec) -> float:
    """Weighted mean cross entropy: sum_t w(y_t) * (-log p_t[y_t]) / sum_t w(y_t)."""
    loss, _ = _loss_and_dlogits(probs, labels, spec)
    return loss


def _loss_and_dlogits(probs: np.ndarray, labels: np.ndarray, spec: LossSpec):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.ndim != 1 or probs.shape[0] != labels.shape[0]:
        raise ContractError(
            f"need probs (T, K) and labels (T,), got {probs.shape} and {labels.shape}"
        )
    T, K = probs.shape
    if spec.class_weights.shape[0] != K:
        raise ContractError(
            f"loss weights cover {spec.class_weights.shape[0]} classes, probs have {K}"
        )
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("probabilities are not valid distributions")
    w = spec.class_weights[labels]
    p_true = probs[np.arange(T), labels]
    if np.any(p_true < _PROB_EPS):
        warnings.warn(
            f"clamped {int((p_true < _PROB_EPS).sum())} zero probabilities at the "
            f"true label",
            DataWarning,
        )
        p_true = np.maximum(p_true, _PROB_EPS)
    wsum = w.sum()
    loss = float((w * -np.log(p_true)).sum() / wsum)
    dlogits = probs.copy()
    dlogits[np.arange(T), labels] -= 1.0
    dlogits *= (w / wsum)[:, None]
    return loss, dlogits


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 0.1
    batch_size: int = 2
    seed: int = 0
    last_k: Optional[int] = None  # None trains every layer
    reset_at_boundary: bool = False

    def trainable_ids(self, net: Network) -> set:
        ids = net.layer_ids()
        if self.last_k is None:
            return set(ids)
        if not (0 <= self.last_k <= len(ids)):
            raise ContractError(
                f"last_k {self.last_k} outside 0..{len(ids)} parameterized layers"
            )
        mask = ns.trainability_mask(net.spec, last_k=self.last_k)
        return {lid for lid, flag in mask.items() if flag}


def _apply_grads(net: Network, grads: dict, lr: float) -> None:
    for layer in net.conv_layers():
        g = grads.get(layer.layer_id)
        if g is None:
            continue
        for name, grad in g.items():
            if grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient at {layer.layer_id}")
            arr = getattr(layer.weights, name)
            setattr(
                layer.weights, name, (arr - lr * grad.astype(arr.dtype)).astype(arr.dtype)
            )
    g = grads.get("head.fc")
    if g is not None:
        for name, grad in g.items():
            if not np.all(np.isfinite(grad)):
                raise NumericError("non-finite gradient at head.fc")
            arr = getattr(net.head_fc, name)
            setattr(
                net.head_fc, name, (arr - lr * grad.astype(arr.dtype)).astype(arr.dtype)
            )


def backward_and_step(net: Network, batch: BatchConcat, loss_spec: LossSpec, config: TrainConfig) -> float:
    """One SGD step over a temporally concatenated batch; returns the loss.

    Only the parameters selected by the config's trainable mask change. With
    reset_at_boundary the clip segments run separately (fresh causal state per
    video) while the loss keeps the same global normalization.
    """
    trainable = config.trainable_ids(net)
    if batch.labels is None:
        raise ContractError("batch carries no label sequence")
    labels = batch.labels.labels
    if not config.reset_at_boundary:
        probs, tape = net.forward_train(batch.clip)
        if probs.shape[0] != labels.shape[0]:
            raise ContractError(
                f"label/output grid mismatch: {probs.shape[0]} output steps vs "
                f"{labels.shape[0]} labels"
            )
        loss, dlogits = _loss_and_dlogits(probs, labels, loss_spec)
        grads = net.backward_from_dlogits(tape, dlogits, trainable)
    else:
        stride = net.temporal_stride_product
        misaligned = [
            b for b in batch.frame_boundaries[1:-1] if b % stride
        ]
        if misaligned:
            raise ContractError(
                f"reset_at_boundary needs clip lengths that tile the temporal "
                f"stride {stride}; boundaries {misaligned} are misaligned"
            )
        bounds = batch.label_boundaries
        w_all = loss_spec.class_weights[labels]
        wsum = w_all.sum()
        loss = 0.0
        grads = {}
        for i in range(len(batch.frame_boundaries) - 1):
            f0, f1 = batch.frame_boundaries[i], batch.frame_boundaries[i + 1]
            s0, s1 = bounds[i], bounds[i + 1]
            seg_labels = labels[s0:s1]
            probs, tape = net.forward_train(batch.clip[:, f0:f1])
            if probs.shape[0] != seg_labels.shape[0]:
                raise ContractError(
                    f"label/output grid mismatch in segment {i}: "
                    f"{probs.shape[0]} output steps vs {seg_labels.shape[0]} labels"
                )
            T = probs.shape[0]
            w = loss_spec.class_weights[seg_labels]
            p_true = np.maximum(probs[np.arange(T), seg_labels], _PROB_EPS)
            loss += float((w * -np.log(p_true)).sum() / wsum)
            dlogits = probs.copy()
            dlogits[np.arange(T), seg_labels] -= 1.0
            dlogits *= (w / wsum)[:, None]
            for lid, g in net.backward_from_dlogits(tape, dlogits, trainable).items():
                if lid not in grads:
                    grads[lid] = g
                else:
                    for name in g:
                        if g[name] is not None:
                            grads[lid][name] = grads[lid][name] + g[name]
    _apply_grads(net, grads, config.lr)
    return loss


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    per_layer: dict
    max_rel_err: float
    num_sampled: int


def gradient_check(
    net: Network,
    clip: np.ndarray,
    labels: np.ndarray,
    loss_spec: LossSpec,
    eps: float = 1e-5,
    max_params: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Central finite differences against the analytic gradients.

    Requires a float64 network. Samples up to max_params parameters across
    all trainable layers and reports the max relative error per layer.
    Samples whose perturbation flips a saturating-ramp activation region are
    skipped and resampled: the loss is not differentiable there, so central
    differences do not estimate the gradient.
    """
    if net.dtype != np.float64:
        raise ContractError("gradient_check requires a float64 network")
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.int64)

    probs, tape = net.forward_train(clip)
    _, dlogits = _loss_and_dlogits(probs, labels, loss_spec)
    analytic = net.backward_from_dlogits(tape, dlogits, set(net.layer_ids()))

    def loss_and_regions():
        p, t = net.forward_train(clip)
        loss, _ = _loss_and_dlogits(p, labels, loss_spec)
        regions = [
            (entry[3] > 0) & (entry[3] < 6)
            for entry in t
            if entry[0] == "conv" and entry[1].activation == "relu6"
        ]
        return loss, regions

    entries = []
    for layer in net.conv_layers():
        entries.append((layer.layer_id, layer.weights, "kernel"))
        entries.append((layer.layer_id, layer.weights, "bias"))
    entries.append(("head.fc", net.head_fc, "weight"))
    entries.append(("head.fc", net.head_fc, "bias"))

    per_layer = {lid: 0.0 for lid, _, _ in entries}
    budget = max(1, max_params // len(entries))
    sampled = 0
    for lid, obj, name in entries:
        arr = getattr(obj, name)
        flat = arr.reshape(-1)
        k = min(budget, flat.size)
        order = rng.permutation(flat.size)
        ga = analytic[lid][name].reshape(-1)
        taken = 0
        for i in order:
            if taken >= k:
                break
            orig = flat[i]
            flat[i] = orig + eps
            lp, reg_p = loss_and_regions()
            flat[i] = orig - eps
            lm, reg_m = loss_and_regions()
            flat[i] = orig
            if any(not np.array_equal(a, b) for a, b in zip(reg_p, reg_m)):
                continue  # kink inside the interval
            numeric = (lp - lm) / (2 * eps)
            denom = max(abs(numeric) + abs(ga[i]), 1e-8)
            rel = abs(numeric - ga[i]) / denom
            per_layer[lid] = max(per_layer[lid], rel)
            sampled += 1
            taken += 1
    return GradCheckReport(per_layer, max(per_layer.values()), sampled)


# ------------------------------------------------------- synthetic counting


@dataclass
class CountingSample:
    clip: np.ndarray
    track: EventTrack
    exercise: str = "oscillating_bar"


def make_oscillating_clip(
    rng: np.random.Generator,
    frames: Optional[int] = None,
    size: int = 16,
    period: Optional[int] = None,
    fps: float = 16.0,
    grid_fps: float = 4.0,
    noise: float = 0.08,
) -> CountingSample:
    """A bright bar bouncing top-to-bottom; one repetition per full period.

    The bar starts each repetition at the top (an end event closes the
    previous one there) and passes the bottom at the half period (the middle
    event). Period, clip length, phase, bar geometry, brightness, background
    level and noise vary per clip; periods are deliberately not multiples of
    the output grid, so the single-step end and middle marks land with a
    rounding jitter against the visual turning points.
    """
    if period is None:
        period = int(rng.choice([25, 30, 35]))
    if frames is None:
        frames = int(rng.choice([160, 192, 224]))
    phase0 = int(rng.integers(0, period // 2))
    thickness = int(rng.integers(1, 3))
    x0 = int(rng.integers(1, size // 2 - 1))
    x1 = int(rng.integers(size // 2 + 1, size - 1))
    brightness = rng.uniform(0.4, 1.0, size=3)
    background = rng.uniform(0.0, 0.15)
    t_axis = np.arange(frames)
    pos = 0.5 - 0.5 * np.cos(2 * np.pi * (t_axis + phase0) / period)
    rows = np.round(pos * (size - thickness)).astype(int)
    clip = background + rng.normal(0.0, noise, (3, frames, size, size))
    for t in range(frames):
        clip[:, t, rows[t] : rows[t] + thickness, x0:x1] += brightness[:, None, None]
    clip = np.clip(clip, 0.0, 1.0).astype(np.float32)

    from .counting import event_step

    num_steps = -(-frames * int(grid_fps) // int(fps))
    events = []
    for t in range(1, frames):
        m = (t + phase0) % period
        if m == 0 or m == period // 2:
            if event_step(t / fps, grid_fps) < num_steps:
                events.append(Event(t / fps, "end" if m == 0 else "middle"))
    track = EventTrack("oscillating_bar", events, frames / fps, grid_fps)
    return CountingSample(clip, track)


def make_oscillating_dataset(n: int, seed: int, **kwargs) -> list:
    rng = np.random.default_rng(seed)
    return [make_oscillating_clip(rng, **kwargs) for _ in range(n)]


def tiny_counting_spec(num_classes: int) -> ns.NetworkSpec:
    """A small inflated network (well under 50k parameters) for the synthetic task."""
    spec = ns.NetworkSpec(
        ns.InputContract(3, 16, 16, 16.0),
        ns.StemSpec(8, 3, 2),
        [
            ns.BlockSpec(0, 8, 8, 4.0, 3, 1, True),
            ns.BlockSpec(1, 8, 16, 4.0, 3, 2, False),
            ns.BlockSpec(2, 16, 16, 4.0, 3, 1, True),
            ns.BlockSpec(3, 16, 16, 4.0, 3, 1, True),
        ],
        ns.HeadSpec(32, num_classes, "temporal"),
    ).validate()
    inflation = ns.InflationSpec(
        mode="by_block_index",
        targets=[
            ns.InflationTarget(0, 3, 1),
            ns.InflationTarget(1, 3, 2),
            ns.InflationTarget(2, 3, 2),
            ns.InflationTarget(3, 3, 1),
        ],
    )
    return ns.inflate(spec, inflation)


def labels_for_sample(sample: CountingSample, scheme: int, grid_stride: int) -> FrameLabelSeq:
    num_steps = -(-sample.clip.shape[1] // grid_stride)
    return densify(sample.track, scheme, num_steps)


@dataclass
class TrainResult:
    net: Network
    mape_per_exercise: dict
    history: list


def evaluate_counting(net: Network, samples: list, scheme: int) -> dict:
    """Decode counts for every sample and aggregate MAPE per exercise."""
    preds = {}
    trues = {}
    for s in samples:
        probs = net.forward_steps(s.clip)
        result = decode_count(probs, scheme)
        preds.setdefault(s.exercise, []).append(result.predicted_count)
        trues.setdefault(s.exercise, []).append(s.track.end_count)
    return {ex: mape(preds[ex], trues[ex]) for ex in preds}


def train_counting_head(
    net: Network,
    train_samples: list,
    eval_samples: list,
    scheme: int,
    config: TrainConfig,
    loss_spec: Optional[LossSpec] = None,
) -> TrainResult:
    """SGD training on temporally concatenated batches, then counting MAPE.

    Deterministic under the config seed. Returns the trained network, the
    per-exercise MAPE on eval_samples and the loss history.
    """
    loss_spec = loss_spec or default_loss_spec(scheme)
    stride = net.temporal_stride_product
    rng = np.random.default_rng(config.seed)
    labels = [labels_for_sample(s, scheme, stride) for s in train_samples]
    history = []
    for step in range(config.steps):
        idx = rng.choice(len(train_samples), size=min(config.batch_size, len(train_samples)), replace=False)
        batch = batch_concat_temporal(
            [train_samples[i].clip for i in idx],
            [labels[i] for i in idx],
            grid_stride=stride,
        )
        loss = backward_and_step(net, batch, loss_spec, config)
        history.append({"step": step, "loss": loss})
    mape_per_exercise = evaluate_counting(net, eval_samples, scheme) if eval_samples else {}
    return TrainResult(net, mape_per_exercise, history)


# ----------------------------------------------------------------- checkpoint

_CKPT_MAGIC = b"NCK1"


def save_checkpoint(path, net: Network, extra: Optional[dict] = None) -> str:
    """Write spec + parameters with a content hash; returns the hash."""
    params = net.get_params()
    tensors = []
    blob = bytearray()
    for lid in net.layer_ids():
        for name, arr in sorted(params[lid].items()):
            raw = np.ascontiguousarray(arr).tobytes()
            tensors.append(
                {
                    "layer": lid,
                    "name": name,
                    "dtype": str(arr.dtype),
                    "shape": list(arr.shape),
                    "offset": len(blob),
                    "nbytes": len(raw),
                }
            )
            blob.extend(raw)
    digest = hashlib.sha256(bytes(blob)).hexdigest()
    header = {
        "schema_version": 1,
        "spec": json.loads(ns.network_spec_to_json(net.spec)),
        "dtype": str(net.dtype),
        "tensors": tensors,
        "sha256": digest,
        "extra": extra or {},
    }
    hb = json.dumps(header).encode("utf-8")
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(struct.pack("<I", len(hb)))
            f.write(hb)
            f.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return digest


def load_checkpoint(path):
    """Read a checkpoint; returns (Network, extra dict). Verifies the hash."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ContractError("bad checkpoint magic")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise ContractError("checkpoint blob does not match its content hash")
    spec = ns.network_spec_from_json(json.dumps(header["spec"]))
    net = Network.build(spec, seed=0, dtype=np.dtype(header["dtype"]))
    params = {}
    for t in header["tensors"]:
        arr = np.frombuffer(
            blob, dtype=t["dtype"], count=int(np.prod(t["shape"])) if t["shape"] else 1,
            offset=t["offset"],
        ).reshape(t["shape"])
        params.setdefault(t["layer"], {})[t["name"]] = arr.copy()
    net.set_params(params)
    return net, header.get("extra", {})


def checkpoint_hash(path) -> str:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ContractError("bad checkpoint magic")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
    return header["sha256"]
