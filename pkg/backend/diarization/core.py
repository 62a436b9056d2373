"""
Domain types shared by every stage of the pipeline.

All times are real-valued seconds. The types are immutable once built, so they
can be handed to worker threads without copying.
"""
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .exceptions import IntervalError, ScaleMismatchError, ShapeError

# Same-speaker intervals closer than this are merged.
ADJACENCY_TOLERANCE = 1e-9


@dataclass(frozen=True, order=True)
class TimeInterval:
    """Half-open span of speech [onset, offset) in seconds"""
    onset: float
    offset: float

    def __post_init__(self):
        if not (math.isfinite(self.onset) and math.isfinite(self.offset)):
            raise IntervalError(f"non-finite interval [{self.onset}, {self.offset}]")
        if self.onset < 0:
            raise IntervalError(f"negative onset {self.onset}")
        if self.offset <= self.onset:
            raise IntervalError(f"offset {self.offset} must be greater than onset {self.onset}")

    @property
    def duration(self):
        return self.offset - self.onset

    def center(self):
        return (self.onset + self.offset) / 2


def interval_overlap(a, b):
    """Length of the intersection of two intervals, 0.0 when disjoint"""
    return max(0.0, min(a.offset, b.offset) - max(a.onset, b.onset))


@dataclass(frozen=True)
class ScaleConfig:
    """
    Segmentation scales, coarsest first. The last scale is the base scale on
    which speaker labels are decided.
    """
    windows: tuple
    hops: tuple

    def __post_init__(self):
        if len(self.windows) < 1:
            raise ScaleMismatchError("at least one scale is required")
        if len(self.hops) != len(self.windows):
            raise ScaleMismatchError(
                f"{len(self.windows)} windows but {len(self.hops)} hops"
            )
        for window, hop in zip(self.windows, self.hops):
            if not window > 0:
                raise ScaleMismatchError(f"window {window} must be positive")
            if not 0 < hop <= window:
                raise ScaleMismatchError(f"hop {hop} must be in (0, {window}]")
        for coarse, fine in zip(self.windows, self.windows[1:]):
            if not coarse > fine:
                raise ScaleMismatchError(
                    f"windows must be strictly decreasing, got {list(self.windows)}"
                )

    @classmethod
    def from_windows(cls, windows, hops=None):
        windows = tuple(float(w) for w in windows)
        if hops is None:
            hops = tuple(w / 2 for w in windows)
        return cls(windows=windows, hops=tuple(float(h) for h in hops))

    @property
    def num_scales(self):
        return len(self.windows)

    @property
    def base_index(self):
        return len(self.windows) - 1

    @property
    def base_window(self):
        return self.windows[-1]

    @property
    def base_hop(self):
        return self.hops[-1]


@dataclass(frozen=True)
class SpeakerTimeline:
    """
    Speaker-attributed speech for one session. Same-speaker intervals never
    overlap; different speakers may overlap.
    """
    session_id: str
    entries: tuple = ()

    @property
    def speakers(self):
        return sorted({speaker for speaker, _ in self.entries})

    def intervals_for(self, speaker):
        return [interval for spk, interval in self.entries if spk == speaker]

    def by_speaker(self):
        grouped = defaultdict(list)
        for speaker, interval in self.entries:
            grouped[speaker].append(interval)
        return dict(grouped)

    def speech_duration(self, speaker=None):
        return sum(
            interval.duration for spk, interval in self.entries
            if speaker is None or spk == speaker
        )

    def with_session_id(self, session_id):
        return SpeakerTimeline(session_id=session_id, entries=self.entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def merge_speaker_intervals(entries, session_id=''):
    """
    Build a timeline from (speaker, interval) pairs, merging overlapping or
    adjacent intervals of the same speaker. Cross-speaker overlap is kept.
    """
    grouped = defaultdict(list)
    for speaker, interval in entries:
        if not isinstance(interval, TimeInterval):
            interval = TimeInterval(*interval)
        grouped[str(speaker)].append(interval)

    merged = []
    for speaker, intervals in grouped.items():
        intervals.sort()
        current_onset, current_offset = intervals[0].onset, intervals[0].offset
        for interval in intervals[1:]:
            if interval.onset - current_offset < ADJACENCY_TOLERANCE:
                current_offset = max(current_offset, interval.offset)
            else:
                merged.append((speaker, TimeInterval(current_onset, current_offset)))
                current_onset, current_offset = interval.onset, interval.offset
        merged.append((speaker, TimeInterval(current_onset, current_offset)))

    merged.sort(key=lambda entry: (entry[1].onset, entry[0], entry[1].offset))
    return SpeakerTimeline(session_id=session_id, entries=tuple(merged))


def as_embedding_matrix(values, dtype=None):
    """
    Validate a (segments x dim) embedding matrix: finite entries and nonzero
    rows, since every consumer takes cosine similarities.
    """
    matrix = np.asarray(values, dtype=dtype)
    if matrix.ndim != 2 or matrix.shape[1] == 0:
        raise ShapeError(f"embedding matrix must be 2-D with dim > 0, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ShapeError("embedding matrix contains non-finite values")
    if matrix.shape[0] and np.any(np.linalg.norm(matrix, axis=1) == 0):
        raise ShapeError("embedding matrix contains a zero-norm row")
    return matrix
