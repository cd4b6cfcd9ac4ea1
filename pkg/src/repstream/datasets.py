"""Dataset manifests, split validation, few-shot sampling and clip preprocessing.

Manifests are JSON-lines files, one entry per video, carrying the qualified
video-level class ("exercise/variation", 40 in total), the recording worker,
the split, frame rate and duration. Splits must be worker-disjoint. The
preprocessing path resamples to 16 fps by nearest source index, pads frames
to a square with black pixels, resizes bilinearly to 256 x 256 and scales
values to [0, 1]; one path serves both training and evaluation.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .counting import FrameLabelSeq
from .errors import ContractError, DataWarning, ManifestError
from .netspec import _load_resource
from .tensor import TensorND

TARGET_FPS = 16.0
TARGET_SIZE = 256
SPLITS = ("train", "validation", "test")
FEWSHOT_SIZES = (5, 10, 20, 50, 100)

# Declared dataset statistics, used by the synthetic manifest builder and
# surfaced by the validator for comparison.
EXPECTED_SPLIT_VIDEOS = {"train": 4000, "validation": 711, "test": 800}
EXPECTED_TOTAL_VIDEOS = 5511
EXPECTED_SPLIT_WORKERS = {"train": 129, "validation": 20, "test": 165}
CLASS_VIDEOS_RANGE = (130, 140)
DURATION_RANGE = (5.0, 8.0)
NATIVE_FPS = 30.0


def load_taxonomy() -> dict:
    return _load_resource("taxonomy.json")


def video_classes(taxonomy: Optional[dict] = None) -> list:
    """The qualified video-level class names, exercise/variation, 40 total."""
    tax = taxonomy or load_taxonomy()
    out = []
    for exercise, entry in tax["exercises"].items():
        for cls in entry["video_classes"]:
            out.append(f"{exercise}/{cls}")
    return out


def frame_kind_map(exercise: str, taxonomy: Optional[dict] = None) -> dict:
    tax = taxonomy or load_taxonomy()
    try:
        return dict(tax["exercises"][exercise]["frame_kinds"])
    except KeyError:
        raise ContractError(f"unknown exercise {exercise!r}") from None


@dataclass
class ManifestEntry:
    video_id: str
    path: str
    video_class: str
    worker_id: str
    split: str
    fps: float
    duration: float
    events_path: Optional[str] = None

    @property
    def exercise(self) -> str:
        return self.video_class.split("/", 1)[0]


@dataclass
class SplitManifest:
    entries: list
    classes: list

    def by_split(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def split_counts(self) -> dict:
        counts = {s: 0 for s in SPLITS}
        for e in self.entries:
            counts[e.split] += 1
        return counts

    def worker_sets(self) -> dict:
        sets = {s: set() for s in SPLITS}
        for e in self.entries:
            sets[e.split].add(e.worker_id)
        return sets

    def summary(self) -> dict:
        counts = self.split_counts()
        workers = {s: len(w) for s, w in self.worker_sets().items()}
        return {
            "videos": counts,
            "total_videos": len(self.entries),
            "unique_workers": workers,
            "total_workers": len({e.worker_id for e in self.entries}),
        }


def validate_entries(entries: list, classes: Optional[list] = None) -> SplitManifest:
    """Check manifest invariants; raises ManifestError listing every violation."""
    classes = classes if classes is not None else video_classes()
    class_set = set(classes)
    violations = []
    seen_ids = set()
    for e in entries:
        if e.video_id in seen_ids:
            violations.append(f"duplicate video id {e.video_id}")
        seen_ids.add(e.video_id)
        if e.video_class not in class_set:
            violations.append(f"{e.video_id}: unknown class {e.video_class!r}")
        if e.split not in SPLITS:
            violations.append(f"{e.video_id}: unknown split {e.split!r}")
        if e.duration <= 0:
            violations.append(f"{e.video_id}: non-positive duration {e.duration}")
        if e.fps <= 0:
            violations.append(f"{e.video_id}: non-positive fps {e.fps}")
    by_split = {s: set() for s in SPLITS}
    for e in entries:
        if e.split in by_split:
            by_split[e.split].add(e.worker_id)
    for a in range(len(SPLITS)):
        for b in range(a + 1, len(SPLITS)):
            overlap = by_split[SPLITS[a]] & by_split[SPLITS[b]]
            if overlap:
                violations.append(
                    f"worker overlap between {SPLITS[a]} and {SPLITS[b]}: "
                    f"{sorted(overlap)}"
                )
    if violations:
        raise ManifestError(
            f"manifest failed validation with {len(violations)} violations",
            violations,
        )
    if not entries:
        warnings.warn("manifest is empty", DataWarning)
    return SplitManifest(list(entries), classes)


def load_and_validate_manifest(path) -> SplitManifest:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: invalid JSON ({exc})") from exc
            entries.append(
                ManifestEntry(
                    video_id=doc["video_id"],
                    path=doc.get("path", ""),
                    video_class=doc["video_class"],
                    worker_id=doc["worker_id"],
                    split=doc["split"],
                    fps=float(doc.get("fps", NATIVE_FPS)),
                    duration=float(doc["duration"]),
                    events_path=doc.get("events_path"),
                )
            )
    return validate_entries(entries)


def save_manifest(path, manifest: SplitManifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.entries:
            doc = {
                "video_id": e.video_id,
                "path": e.path,
                "video_class": e.video_class,
                "worker_id": e.worker_id,
                "split": e.split,
                "fps": e.fps,
                "duration": e.duration,
            }
            if e.events_path:
                doc["events_path"] = e.events_path
            f.write(json.dumps(doc) + "\n")


def make_synthetic_manifest(seed: int = 0) -> SplitManifest:
    """Build a manifest matching the declared dataset statistics exactly:
    4000/711/800 videos over 40 classes, worker-disjoint splits with
    129/20/165 unique workers, 30 fps, durations in [5, 8] seconds."""
    rng = np.random.default_rng(seed)
    classes = video_classes()
    per_split_class = {"train": [100] * 40, "test": [20] * 40}
    # 711 validation videos over 40 classes: 31 classes get 18, 9 get 17
    per_split_class["validation"] = [18] * 31 + [17] * 9
    workers = {
        s: [f"{s}-worker-{i:03d}" for i in range(EXPECTED_SPLIT_WORKERS[s])]
        for s in SPLITS
    }
    entries = []
    counter = 0
    for split in SPLITS:
        pool = workers[split]
        idx = 0
        for c, cls in enumerate(classes):
            for _ in range(per_split_class[split][c]):
                entries.append(
                    ManifestEntry(
                        video_id=f"vid-{counter:05d}",
                        path=f"videos/{split}/vid-{counter:05d}.mp4",
                        video_class=cls,
                        worker_id=pool[idx % len(pool)],
                        split=split,
                        fps=NATIVE_FPS,
                        duration=float(rng.uniform(*DURATION_RANGE)),
                    )
                )
                idx += 1
                counter += 1
    return validate_entries(entries)


def sample_fewshot(manifest: SplitManifest, n: int, seed: int = 0) -> SplitManifest:
    """Uniformly subsample the train split to exactly n entries per class.

    Validation and test entries are untouched. Deterministic under the seed.
    """
    if n < 1:
        raise ContractError(f"few-shot size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for e in manifest.by_split("train"):
        by_class.setdefault(e.video_class, []).append(e)
    kept = []
    for cls in manifest.classes:
        pool = by_class.get(cls, [])
        if len(pool) < n:
            raise ContractError(
                f"class {cls!r} has only {len(pool)} train entries, need {n}"
            )
        chosen = rng.choice(len(pool), size=n, replace=False)
        kept.extend(pool[i] for i in sorted(chosen))
    others = [e for e in manifest.entries if e.split != "train"]
    return SplitManifest(kept + others, manifest.classes)


# ------------------------------------------------------------- preprocessing


def resample_indices(num_frames: int, native_fps: float, target_fps: float = TARGET_FPS) -> np.ndarray:
    """Source indices of the nearest-source-index temporal resampling j -> floor(j * native / target)."""
    if native_fps < target_fps:
        raise ContractError(
            f"native fps {native_fps} below target {target_fps}; upsampling unsupported"
        )
    count = int(np.ceil(num_frames * target_fps / native_fps))
    j = np.arange(count)
    src = np.floor(j * native_fps / target_fps).astype(np.int64)
    return src[src < num_frames]


def pad_to_square(frame: np.ndarray) -> np.ndarray:
    """Symmetric black padding to a square; odd remainders pad bottom/right."""
    h, w = frame.shape[:2]
    size = max(h, w)
    top = (size - h) // 2
    left = (size - w) // 2
    pads = ((top, size - h - top), (left, size - w - left)) + ((0, 0),) * (frame.ndim - 2)
    return np.pad(frame, pads)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64, copy=False)
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    img = img.astype(np.float64, copy=False)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess_clip(frames: np.ndarray, native_fps: float, dtype=np.float32) -> TensorND:
    """Full preprocessing: resample to 16 fps, pad square, resize, scale to [0, 1].

    frames: (T, H, W, 3), uint8 in [0, 255] or float already in [0, 1].
    Returns a TensorND with axes CTHW and spatial extent 256.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ContractError(f"expected RGB frames (T, H, W, 3), got {frames.shape}")
    if frames.shape[0] == 0:
        raise ContractError("clip must contain at least one frame")
    idx = resample_indices(frames.shape[0], native_fps)
    out = np.empty((3, len(idx), TARGET_SIZE, TARGET_SIZE), dtype=dtype)
    scale = 255.0 if frames.dtype == np.uint8 else 1.0
    for t, src in enumerate(idx):
        square = pad_to_square(frames[src])
        resized = _resize_bilinear(square, TARGET_SIZE, TARGET_SIZE) / scale
        out[:, t] = resized.transpose(2, 0, 1).astype(dtype)
    return TensorND(out, "CTHW")


@dataclass
class JitterParams:
    multiplicative: tuple = (0.8, 1.25)
    additive: tuple = (-0.05, 0.05)


def augment_clip(
    clip,
    crop_len: int = 63,
    jitter: Optional[JitterParams] = None,
    rng_seed: int = 0,
):
    """Random contiguous crop plus per-channel color jitter, clamped to [0, 1].

    The whole clip is used (with a warning) when shorter than crop_len. The
    crop offset and the per-channel jitter are sampled once per clip and are
    deterministic under the seed.
    """
    tensor_in = isinstance(clip, TensorND)
    data = clip.data if tensor_in else np.asarray(clip)
    if data.ndim != 4:
        raise ContractError(f"expected clip (C, T, H, W), got rank {data.ndim}")
    jitter = jitter or JitterParams()
    rng = np.random.default_rng(rng_seed)
    T = data.shape[1]
    if crop_len > T:
        warnings.warn(
            f"clip of {T} frames shorter than crop {crop_len}; using it whole",
            DataWarning,
        )
        start, length = 0, T
    else:
        start = int(rng.integers(0, T - crop_len + 1))
        length = crop_len
    out = data[:, start : start + length].copy()
    mult = rng.uniform(*jitter.multiplicative, size=3)
    add = rng.uniform(*jitter.additive, size=3)
    out = out * mult[:, None, None, None] + add[:, None, None, None]
    out = np.clip(out, 0.0, 1.0).astype(data.dtype)
    return TensorND(out, "CTHW") if tensor_in else out


@dataclass
class BatchConcat:
    """Clips joined along time, with per-video boundaries on both grids."""

    clip: np.ndarray
    frame_boundaries: list
    labels: Optional[FrameLabelSeq]
    label_boundaries: Optional[list]


def batch_concat_temporal(
    clips: list, label_seqs: Optional[list] = None, grid_stride: int = 4
) -> BatchConcat:
    """Concatenate clips along the temporal axis instead of a batch axis.

    Per-clip label sequences (one label per output step of that clip alone)
    are resampled onto the concatenated output grid: global step k, which
    fires at global frame k * grid_stride, takes the label of the owning
    video at its local step floor(local_frame / grid_stride). Boundaries on
    both the frame and the label grid allow per-video metrics afterwards.
    """
    if not clips:
        raise ContractError("need at least one clip")
    arrays = [c.data if isinstance(c, TensorND) else np.asarray(c) for c in clips]
    base = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.ndim != 4 or a.shape[0] != base[0] or a.shape[2:] != base[2:]:
            raise ContractError(
                f"clip {i} shape {a.shape} incompatible with clip 0 shape {base}"
            )
    frame_boundaries = [0]
    for a in arrays:
        frame_boundaries.append(frame_boundaries[-1] + a.shape[1])
    clip = np.concatenate(arrays, axis=1)

    labels = None
    label_boundaries = None
    if label_seqs is not None:
        if len(label_seqs) != len(arrays):
            raise ContractError(
                f"{len(arrays)} clips but {len(label_seqs)} label sequences"
            )
        scheme = label_seqs[0].scheme
        for i, (a, seq) in enumerate(zip(arrays, label_seqs)):
            expected = -(-a.shape[1] // grid_stride)
            if seq.scheme != scheme:
                raise ContractError("label sequences mix schemes")
            if len(seq.labels) != expected:
                raise ContractError(
                    f"clip {i}: label grid mismatch, clip of {a.shape[1]} frames "
                    f"needs {expected} steps, labels have {len(seq.labels)}"
                )
        total_t = clip.shape[1]
        n_steps = -(-total_t // grid_stride)
        out = np.empty(n_steps, dtype=np.int64)
        owner = 0
        for k in range(n_steps):
            g = k * grid_stride
            while g >= frame_boundaries[owner + 1]:
                owner += 1
            local = g - frame_boundaries[owner]
            out[k] = label_seqs[owner].labels[local // grid_stride]
        labels = FrameLabelSeq(scheme, out)
        label_boundaries = [
            -(-b // grid_stride) for b in frame_boundaries
        ]
    return BatchConcat(clip, frame_boundaries, labels, label_boundaries)


# ------------------------------------------------------- framed binary input


def write_frame_stream(fileobj, frames: np.ndarray) -> None:
    """Write uint8 frames (T, H, W, C) as the framed binary stream format."""
    frames = np.asarray(frames)
    t, h, w, c = frames.shape
    fileobj.write(struct.pack("<III", w, h, c))
    fileobj.write(np.ascontiguousarray(frames, dtype=np.uint8).tobytes())


def iter_frame_stream(fileobj) -> Iterable[np.ndarray]:
    """Yield (H, W, C) uint8 frames from a framed binary stream.

    Header: three little-endian uint32 (width, height, channels), then raw
    frames back to back. A trailing partial frame raises ContractError.
    """
    header = fileobj.read(12)
    if len(header) < 12:
        raise ContractError("frame stream header truncated")
    w, h, c = struct.unpack("<III", header)
    frame_bytes = w * h * c
    if frame_bytes == 0:
        raise ContractError(f"degenerate frame geometry {w}x{h}x{c}")
    index = 0
    while True:
        blob = fileobj.read(frame_bytes)
        if not blob:
            return
        if len(blob) < frame_bytes:
            raise ContractError(f"truncated frame at index {index}")
        yield np.frombuffer(blob, dtype=np.uint8).reshape(h, w, c)
        index += 1
