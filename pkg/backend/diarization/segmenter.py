"""
Multi-scale uniform segmentation and nearest-center grouping.

Every speech region is cut into uniform windows at each scale. Each base-scale
segment is then paired with the segment at every coarser scale whose center is
closest to its own.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .core import ADJACENCY_TOLERANCE, TimeInterval, merge_speaker_intervals
from .exceptions import ScaleMismatchError, SegmentationError

logger = logging.getLogger(__name__)

# Rows of the base-by-coarse distance matrix evaluated at once in group_scales.
GROUPING_BLOCK = 2048


@dataclass(frozen=True)
class MultiScaleSegmentSet:
    """
    Segments of every scale plus the grouping of coarse segments onto the
    base scale.

    group_map[i, k] is the index of the scale-k segment grouped with base
    segment i; base_spans[i] is the part of the timeline base step i speaks for.
    """
    scale_config: object
    per_scale_segments: tuple
    group_map: np.ndarray
    regions: tuple
    base_spans: np.ndarray

    @property
    def num_steps(self):
        return len(self.per_scale_segments[-1])

    @property
    def base_segments(self):
        return self.per_scale_segments[-1]

    def segment_counts(self):
        return [len(segments) for segments in self.per_scale_segments]


def uniform_segments(region, window, hop):
    """
    Cut a region into windows starting every `hop` seconds.

    Cutting stops at the first window that reaches the region end, which is
    clipped there. A final window shorter than `hop` is folded into the one
    before it so the region stays covered without a sliver segment.
    """
    if not window > 0:
        raise SegmentationError(f"window must be positive, got {window}")
    if not 0 < hop <= window:
        raise SegmentationError(f"hop must be in (0, window], got hop={hop} window={window}")
    onset, offset = region.onset, region.offset
    if offset - onset <= 0:
        return []

    segments = []
    n = 0
    while True:
        start = onset + n * hop
        end = min(start + window, offset)
        if end >= offset:
            if segments and end - start < hop:
                previous = segments.pop()
                segments.append(TimeInterval(previous.onset, offset))
            else:
                segments.append(TimeInterval(start, offset))
            return segments
        segments.append(TimeInterval(start, end))
        n += 1


def _centers(segments):
    return np.array([segment.center() for segment in segments], dtype=np.float64)


def group_scales(base, coarse):
    """
    For each base segment, the index of the coarse segment with the nearest
    center. Ties go to the lower index.
    """
    if not coarse:
        raise ScaleMismatchError("cannot group onto an empty scale")
    base_centers = _centers(base)
    coarse_centers = _centers(coarse)
    groups = np.empty(len(base_centers), dtype=np.int64)
    for start in range(0, len(base_centers), GROUPING_BLOCK):
        block = base_centers[start:start + GROUPING_BLOCK]
        distance = np.abs(coarse_centers[None, :] - block[:, None])
        # argmin returns the first minimum, i.e. the lower index on ties
        groups[start:start + GROUPING_BLOCK] = np.argmin(distance, axis=1)
    return groups


def _region_step_spans(segments, region):
    """Tile a region with one span per base segment, cut at center midpoints"""
    centers = _centers(segments)
    bounds = [region.onset]
    for j in range(len(segments) - 1):
        midpoint = (centers[j] + centers[j + 1]) / 2
        bounds.append(min(max(midpoint, segments[j + 1].onset), segments[j].offset))
    bounds.append(region.offset)
    return np.column_stack([bounds[:-1], bounds[1:]])


def _check_regions(regions):
    for previous, current in zip(regions, regions[1:]):
        if current.onset < previous.offset:
            raise SegmentationError(
                f"speech regions must be sorted and non-overlapping: "
                f"[{previous.onset}, {previous.offset}] then [{current.onset}, {current.offset}]"
            )


def segment_all_scales(regions, cfg):
    """Segment every region at every scale and group the scales onto the base"""
    regions = tuple(regions)
    _check_regions(regions)
    per_scale = [[] for _ in range(cfg.num_scales)]
    for region in regions:
        for k in range(cfg.num_scales):
            per_scale[k].extend(uniform_segments(region, cfg.windows[k], cfg.hops[k]))

    logger.debug(
        "segmented %d regions into %s segments per scale",
        len(regions), [len(segments) for segments in per_scale],
    )
    return build_segment_set(cfg, per_scale, regions)


def build_segment_set(cfg, per_scale, regions):
    """
    Assemble a MultiScaleSegmentSet from already-cut segments, computing the
    grouping and the base step spans. Shared by segmentation and archive loading.
    """
    regions = tuple(regions)
    if len(per_scale) != cfg.num_scales:
        raise ScaleMismatchError(
            f"expected segments for {cfg.num_scales} scales, got {len(per_scale)}"
        )
    base = list(per_scale[cfg.base_index])
    group_map = np.empty((len(base), cfg.num_scales), dtype=np.int64)
    if base:
        for k in range(cfg.num_scales):
            if k == cfg.base_index:
                group_map[:, k] = np.arange(len(base))
            else:
                group_map[:, k] = group_scales(base, per_scale[k])

    spans = []
    cursor = 0
    for region in regions:
        start = cursor
        while cursor < len(base) and base[cursor].onset < region.offset:
            cursor += 1
        if cursor > start:
            spans.append(_region_step_spans(base[start:cursor], region))
    if cursor != len(base):
        raise ScaleMismatchError("base segments fall outside the speech regions")

    return MultiScaleSegmentSet(
        scale_config=cfg,
        per_scale_segments=tuple(tuple(segments) for segments in per_scale),
        group_map=group_map,
        regions=regions,
        base_spans=np.concatenate(spans) if spans else np.empty((0, 2)),
    )


def speech_regions(timeline):
    """Union of all speakers' speech, i.e. the oracle speech activity"""
    union = merge_speaker_intervals(
        ('speech', interval) for _, interval in timeline.entries
    )
    return [interval for _, interval in union.entries]


def step_activity_to_timeline(active, spans, speaker_names, session_id=''):
    """
    Turn a (speakers x steps) boolean grid into a timeline by joining the spans
    of consecutive active base steps per speaker.
    """
    entries = []
    for s, name in enumerate(speaker_names):
        for i in np.flatnonzero(active[s]):
            onset, offset = spans[i]
            if offset - onset > ADJACENCY_TOLERANCE:
                entries.append((name, TimeInterval(float(onset), float(offset))))
    return merge_speaker_intervals(entries, session_id=session_id)
