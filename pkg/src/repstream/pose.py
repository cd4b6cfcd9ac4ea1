"""Skeleton layouts, graph-partition adjacency, layout remapping, pose augmentation.

Pose sequences are (frames, joints, 3) arrays with x, y in the normalized
image frame [0, 1] plus a confidence channel. Layouts ship as versioned data
files; adjacency construction follows the spatial partitioning strategy used
by skeleton graph classifiers (root, centripetal and centrifugal neighbor
groups ordered by hop distance to the center node).
"""
from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ContractError, DataWarning
from .netspec import _load_resource

LAYOUT_FILES = {
    "blazepose33": "layout_blazepose33.json",
    "openpose18": "layout_openpose18.json",
}


@dataclass
class SkeletonLayout:
    name: str
    nodes: list
    edges: list
    center: int

    def __post_init__(self):
        n = len(self.nodes)
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ContractError(f"edge ({i}, {j}) references a node outside 0..{n - 1}")
        if not (0 <= self.center < n):
            raise ContractError(f"center node {self.center} outside 0..{n - 1}")
        if n and not self.is_connected():
            raise ContractError(f"layout {self.name!r} is not connected")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def neighbors(self) -> list:
        adj = [set() for _ in range(self.num_nodes)]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def is_connected(self) -> bool:
        adj = self.neighbors()
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.num_nodes

    def hop_distances(self, source: int) -> np.ndarray:
        dist = np.full(self.num_nodes, -1, dtype=np.int64)
        dist[source] = 0
        adj = self.neighbors()
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist


def build_layout(name: str) -> SkeletonLayout:
    """Load one of the shipped skeleton layouts by name."""
    fname = LAYOUT_FILES.get(name)
    if fname is None:
        raise ConfigurationError(
            f"unknown layout {name!r}; available: {sorted(LAYOUT_FILES)}"
        )
    doc = _load_resource(fname)
    return SkeletonLayout(
        name=doc["name"],
        nodes=list(doc["nodes"]),
        edges=[tuple(e) for e in doc["edges"]],
        center=int(doc["center"]),
    )


@dataclass
class AdjacencyPartitions:
    """Degree-normalized partition matrices plus the learnable mask shape.

    matrices has shape (num_partitions, V, V); the unnormalized supports of
    the partitions are disjoint and their union is the support of A + I.
    The edge-importance mask is elementwise over the same shape.
    """

    matrices: np.ndarray
    partition_names: list
    hop_distance: np.ndarray

    @property
    def mask_shape(self) -> tuple:
        return self.matrices.shape


def build_adjacency(
    layout: SkeletonLayout, strategy: str = "spatial_partition", max_hop: int = 1
) -> AdjacencyPartitions:
    """Spatial-partition adjacency for graph convolution over a skeleton.

    Row-normalizes A + I (within max_hop) and splits it into the root group
    (self loops), the centripetal group (neighbors closer to the center) and
    the centrifugal group (neighbors farther from the center); neighbors at
    the same distance as the node join the centripetal matrix. One
    centripetal/centrifugal pair is emitted per hop.
    """
    if strategy != "spatial_partition":
        raise ConfigurationError(f"unknown adjacency strategy {strategy!r}")
    if max_hop < 1:
        raise ContractError(f"max_hop must be >= 1, got {max_hop}")
    v = layout.num_nodes
    adj = np.zeros((v, v), dtype=np.float64)
    for i, j in layout.edges:
        adj[i, j] = 1.0
        adj[j, i] = 1.0

    # all-pairs hop distance via BFS from every node
    hop = np.full((v, v), np.iinfo(np.int64).max, dtype=np.int64)
    for src in range(v):
        hop[src] = layout.hop_distances(src)

    within = hop <= max_hop
    normalized = np.where(within, 1.0, 0.0)
    row_deg = normalized.sum(axis=1)
    normalized = normalized / row_deg[:, None]

    center_dist = layout.hop_distances(layout.center)
    matrices = []
    names = []
    root = np.zeros((v, v))
    np.fill_diagonal(root, np.diag(normalized))
    matrices.append(root)
    names.append("root")
    for h in range(1, max_hop + 1):
        closer = np.zeros((v, v))
        further = np.zeros((v, v))
        for i in range(v):
            for j in range(v):
                if hop[i, j] != h:
                    continue
                if center_dist[j] > center_dist[i]:
                    further[i, j] = normalized[i, j]
                else:
                    closer[i, j] = normalized[i, j]
        matrices.append(closer)
        names.append(f"centripetal_hop{h}")
        matrices.append(further)
        names.append(f"centrifugal_hop{h}")
    return AdjacencyPartitions(np.stack(matrices), names, hop)


@dataclass
class PoseSequence:
    """Pose keypoints over time: (frames, joints, 3) with x, y, confidence."""

    data: np.ndarray
    layout: str
    fps: float = 16.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ContractError(
                f"pose data must be (frames, joints, 3), got {self.data.shape}"
            )

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_joints(self) -> int:
        return self.data.shape[1]


def map_to_openpose(seq: PoseSequence) -> PoseSequence:
    """Remap a blazepose33 sequence onto the 18-keypoint openpose18 layout.

    The neck is synthesized as the midpoint of the two shoulders; its
    confidence is the minimum of the two shoulder confidences.
    """
    if seq.layout != "blazepose33":
        raise ContractError(
            f"mapping expects a blazepose33 sequence, got layout {seq.layout!r}"
        )
    doc = _load_resource("blazepose_to_openpose.json")
    src_nodes = build_layout(doc["source_layout"]).num_nodes
    if seq.num_joints != src_nodes:
        raise ContractError(
            f"joint count mismatch: sequence has {seq.num_joints}, layout expects {src_nodes}"
        )
    mapping = doc["map"]
    n_target = len(mapping)
    out = np.zeros((seq.num_frames, n_target, 3), dtype=np.float64)
    ls, rs = doc["neck_sources"]
    for tgt_str, src in mapping.items():
        tgt = int(tgt_str)
        if src == "neck":
            out[:, tgt, :2] = 0.5 * (seq.data[:, ls, :2] + seq.data[:, rs, :2])
            out[:, tgt, 2] = np.minimum(seq.data[:, ls, 2], seq.data[:, rs, 2])
        else:
            out[:, tgt] = seq.data[:, int(src)]
    return PoseSequence(out, doc["target_layout"], seq.fps)


@dataclass
class CameraMotionParams:
    """Ranges for the simulated camera path; each is an inclusive (lo, hi)."""

    rotation_deg: tuple = (-10.0, 10.0)
    translate_x: tuple = (-0.05, 0.05)
    translate_y: tuple = (-0.05, 0.05)
    scale: tuple = (0.9, 1.1)

    def validate(self):
        for name in ("rotation_deg", "translate_x", "translate_y", "scale"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
                raise ContractError(f"invalid range for {name}: ({lo}, {hi})")
        return self


def camera_motion_augment(
    seq: PoseSequence, params: CameraMotionParams, rng_seed: int
) -> PoseSequence:
    """Apply a smoothly interpolated random camera motion to the keypoints.

    A start and an end transform (rotation about the frame center, isotropic
    scale, translation) are sampled; their parameters are linearly
    interpolated over time and applied to x, y. Confidence is untouched.
    Deterministic under a fixed seed.
    """
    params.validate()
    rng = np.random.default_rng(rng_seed)

    def sample():
        return np.array(
            [
                rng.uniform(*params.rotation_deg),
                rng.uniform(*params.scale),
                rng.uniform(*params.translate_x),
                rng.uniform(*params.translate_y),
            ]
        )

    start, end = sample(), sample()
    frames = seq.num_frames
    out = seq.data.copy()
    center = np.array([0.5, 0.5])
    for f in range(frames):
        lam = f / (frames - 1) if frames > 1 else 0.0
        theta_deg, scale, tx, ty = (1 - lam) * start + lam * end
        theta = np.deg2rad(theta_deg)
        rot = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        xy = seq.data[f, :, :2]
        out[f, :, :2] = (xy - center) @ (scale * rot).T + center + np.array([tx, ty])
    return PoseSequence(out, seq.layout, seq.fps)


def crop_pose_window(seq: PoseSequence, length: int = 90, rng_seed: int = 0) -> PoseSequence:
    """Uniformly positioned contiguous crop of exactly `length` frames.

    Sequences shorter than the window are returned whole with a warning.
    """
    if seq.num_frames == 0:
        raise ContractError("cannot crop an empty pose sequence")
    if length > seq.num_frames:
        warnings.warn(
            f"sequence of {seq.num_frames} frames shorter than window {length}; "
            f"returning it whole",
            DataWarning,
        )
        return PoseSequence(seq.data.copy(), seq.layout, seq.fps)
    rng = np.random.default_rng(rng_seed)
    start = int(rng.integers(0, seq.num_frames - length + 1))
    return PoseSequence(seq.data[start : start + length].copy(), seq.layout, seq.fps)


# ------------------------------------------------------------------ file I/O


def save_pose_jsonl(path, seq: PoseSequence) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            json.dumps({"layout": seq.layout, "fps": seq.fps, "frames": seq.num_frames})
            + "\n"
        )
        for frame in seq.data:
            f.write(json.dumps({"joints": frame.tolist()}) + "\n")


def load_pose_jsonl(path) -> PoseSequence:
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        frames = [json.loads(line)["joints"] for line in f if line.strip()]
    data = np.asarray(frames, dtype=np.float64)
    if data.size == 0:
        data = data.reshape(0, 0, 3)
    return PoseSequence(data, header["layout"], header.get("fps", 16.0))
