"""Repetition events, per-step label schemes, and count decoding.

Three annotation schemes densify sparse repetition events onto the output
step grid (4 steps per second by default):

  scheme 1: within vs end. An end event marks its step "end".
  scheme 2: within vs middle vs end. Middle events additionally mark "middle".
  scheme 3: first half vs second half. Steps from a middle step (inclusive)
            up to the next end step (exclusive) are "second_half"; everything
            else, including the end step itself, is "first_half".

Decoding turns a label sequence back into a count. Scheme 3 counts every
second-to-first transition. Schemes 1 and 2 count maximal runs of "end"
labels with a debounce: scheme 1 requires at least one non-end label after
the run before the stream ends, scheme 2 suppresses an end run when another
end run follows it with no "middle" label in between (the final end run of a
stream therefore counts). Probability sequences are argmaxed first, ties
resolved toward the lowest class id.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DataWarning

SCHEME_VOCAB = {
    1: ("within", "end"),
    2: ("within", "middle", "end"),
    3: ("first_half", "second_half"),
}

DEFAULT_GRID_FPS = 4.0

# Published per-exercise counting errors (mean absolute percentage error) of
# the streaming end-to-end baseline under each annotation scheme, kept as
# reference constants for report comparison.
BASELINE_MAPE = {
    1: {
        "spiderman pushups": 25.9,
        "dead bug": 39.3,
        "alternating lateral lunges": 33.3,
        "inchworm": 109.0,
    },
    2: {
        "spiderman pushups": 17.1,
        "dead bug": 22.3,
        "alternating lateral lunges": 13.4,
        "inchworm": 49.2,
    },
    3: {
        "spiderman pushups": 4.6,
        "dead bug": 7.2,
        "alternating lateral lunges": 2.2,
        "inchworm": 21.5,
    },
}

EVENT_KINDS = ("end", "middle", "state")


@dataclass
class Event:
    t: float  # seconds
    kind: str

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ContractError(f"unknown event kind {self.kind!r}")


@dataclass
class EventTrack:
    """Sparse, time-sorted repetition events for one video."""

    exercise: str
    events: list
    duration: float
    fps_grid: float = DEFAULT_GRID_FPS

    def __post_init__(self):
        times = [e.t for e in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ContractError("event times must be strictly increasing")
        if any(e.t < 0 for e in self.events):
            raise ContractError("event times must be non-negative")

    @property
    def end_count(self) -> int:
        return sum(1 for e in self.events if e.kind == "end")


@dataclass
class FrameLabelSeq:
    scheme: int
    labels: np.ndarray  # int class ids on the output step grid

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        vocab = SCHEME_VOCAB.get(self.scheme)
        if vocab is None:
            raise ConfigurationError(f"unknown scheme {self.scheme}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(vocab)):
            raise ContractError(
                f"labels outside scheme {self.scheme} vocabulary of size {len(vocab)}"
            )

    @property
    def vocab(self) -> tuple:
        return SCHEME_VOCAB[self.scheme]

    def names(self) -> list:
        return [self.vocab[i] for i in self.labels]


@dataclass
class CountResult:
    predicted_count: int
    event_steps: list
    true_count: Optional[int] = None


def event_step(t: float, fps_grid: float) -> int:
    """Grid step owning an event at t seconds (round half up)."""
    return int(np.floor(t * fps_grid + 0.5))


def densify(track: EventTrack, scheme: int, num_steps: int) -> FrameLabelSeq:
    """Expand sparse events into per-step labels under the given scheme."""
    vocab = SCHEME_VOCAB.get(scheme)
    if vocab is None:
        raise ConfigurationError(f"unknown scheme {scheme}")
    steps = []
    for e in track.events:
        s = event_step(e.t, track.fps_grid)
        if s >= num_steps:
            raise ContractError(
                f"event at t={e.t}s maps to step {s}, beyond num_steps={num_steps}"
            )
        steps.append((s, e.kind))
    seen = set()
    for s, _ in steps:
        if s in seen:
            raise ContractError(f"two events map to the same grid step {s}")
        seen.add(s)

    if scheme in (1, 2):
        labels = np.zeros(num_steps, dtype=np.int64)  # within
        for s, kind in steps:
            if kind == "end":
                labels[s] = vocab.index("end")
            elif kind == "middle" and scheme == 2:
                labels[s] = vocab.index("middle")
        return FrameLabelSeq(scheme, labels)

    # scheme 3: phase intervals; a middle step opens the second half, an end
    # step returns to the first half
    labels = np.zeros(num_steps, dtype=np.int64)  # first_half
    phase = 0
    marks = dict(steps)
    open_middle = False
    for s in range(num_steps):
        kind = marks.get(s)
        if kind == "middle":
            phase = 1
            open_middle = True
        elif kind == "end":
            phase = 0
            open_middle = False
        labels[s] = phase
    if open_middle:
        warnings.warn(
            "track ends inside a repetition (middle without a following end); "
            "trailing steps keep the second-half phase",
            DataWarning,
        )
    return FrameLabelSeq(3, labels)


class SchemeDecoder:
    """Incremental label-to-count decoder; push one label at a time."""

    def __init__(self, scheme: int):
        if scheme not in SCHEME_VOCAB:
            raise ConfigurationError(f"unknown scheme {scheme}")
        self.scheme = scheme
        self.count = 0
        self.event_steps = []
        self._step = 0
        self._in_end_run = False
        self._run_start = 0
        self._middle_since_run = False
        self._had_end_run = False
        self._prev = None

    def push(self, label: int) -> int:
        vocab = SCHEME_VOCAB[self.scheme]
        name = vocab[label]
        if self.scheme == 3:
            if self._prev == "second_half" and name == "first_half":
                self.count += 1
                self.event_steps.append(self._step)
            self._prev = name
        elif self.scheme == 1:
            if name == "end":
                if not self._in_end_run:
                    self._in_end_run = True
                    self._run_start = self._step
            else:
                if self._in_end_run:
                    self.count += 1
                    self.event_steps.append(self._run_start)
                    self._in_end_run = False
        else:  # scheme 2
            if name == "end":
                if not self._in_end_run:
                    starts_new = (not self._had_end_run) or self._middle_since_run
                    if starts_new:
                        self.count += 1
                        self.event_steps.append(self._step)
                    self._in_end_run = True
                    self._had_end_run = True
                    self._middle_since_run = False
            else:
                self._in_end_run = False
                if name == "middle":
                    self._middle_since_run = True
        self._step += 1
        return self.count

    def result(self, true_count: Optional[int] = None) -> CountResult:
        return CountResult(self.count, list(self.event_steps), true_count)


def decode_count(labels_or_probs, scheme: int, true_count: Optional[int] = None) -> CountResult:
    """Decode a label sequence (or probability rows, argmaxed) into a count."""
    if isinstance(labels_or_probs, FrameLabelSeq):
        if labels_or_probs.scheme != scheme:
            raise ContractError(
                f"label sequence carries scheme {labels_or_probs.scheme}, "
                f"asked to decode as {scheme}"
            )
        labels = labels_or_probs.labels
    else:
        arr = np.asarray(labels_or_probs)
        if arr.ndim == 2:
            labels = arr.argmax(axis=1)  # ties resolve to the lowest class id
        elif arr.ndim == 1:
            labels = arr.astype(np.int64)
        else:
            raise ContractError(f"expected labels (T,) or probabilities (T, K), got rank {arr.ndim}")
        vocab = SCHEME_VOCAB.get(scheme)
        if vocab is None:
            raise ConfigurationError(f"unknown scheme {scheme}")
        if labels.size and (labels.min() < 0 or labels.max() >= len(vocab)):
            raise ContractError(f"labels outside scheme {scheme} vocabulary")
    dec = SchemeDecoder(scheme)
    for lab in labels:
        dec.push(int(lab))
    return dec.result(true_count)


def mape(predicted: Sequence[float], truth: Sequence[float]) -> float:
    """Mean absolute percentage error over videos, in percent.

    Entries with a zero true count are excluded with a warning (the
    percentage is undefined there).
    """
    pred = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(truth, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ContractError(
            f"predicted and truth must be equal-length vectors, got {pred.shape} "
            f"and {true.shape}"
        )
    keep = true > 0
    if not np.all(keep):
        warnings.warn(
            f"excluded {int((~keep).sum())} entries with zero true count", DataWarning
        )
    if not np.any(keep):
        raise ContractError("no entries with positive true count")
    return float(np.mean(np.abs(pred[keep] - true[keep]) / true[keep]) * 100.0)


# ------------------------------------------------------------------ file I/O


def event_track_to_json(track: EventTrack) -> str:
    return json.dumps(
        {
            "exercise": track.exercise,
            "fps_grid": track.fps_grid,
            "duration": track.duration,
            "events": [{"t": e.t, "kind": e.kind} for e in track.events],
        },
        indent=2,
    )


def event_track_from_json(text: str, kind_map: Optional[dict] = None) -> EventTrack:
    """Parse an event track; raw frame-level class names are mapped to the
    generic kinds via kind_map when given."""
    doc = json.loads(text)
    events = []
    for e in doc["events"]:
        kind = e["kind"]
        if kind not in EVENT_KINDS:
            if kind_map and kind in kind_map:
                kind = kind_map[kind]
            else:
                raise ContractError(f"unknown event kind {e['kind']!r}")
        events.append(Event(float(e["t"]), kind))
    return EventTrack(
        exercise=doc["exercise"],
        events=events,
        duration=float(doc.get("duration", events[-1].t if events else 0.0)),
        fps_grid=float(doc.get("fps_grid", DEFAULT_GRID_FPS)),
    )
