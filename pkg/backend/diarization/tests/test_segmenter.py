import numpy as np
import pytest

from diarization.core import ScaleConfig, TimeInterval
from diarization.exceptions import ScaleMismatchError, SegmentationError
from diarization.segmenter import (
    group_scales, segment_all_scales, speech_regions, step_activity_to_timeline, uniform_segments,
)

from .factories import SpeakerTimelineFactory


def bounds(segments):
    return [(round(s.onset, 9), round(s.offset, 9)) for s in segments]


class TestUniformSegments:
    def test_half_second_windows(self):
        segments = uniform_segments(TimeInterval(0.0, 2.0), 0.5, 0.25)
        assert len(segments) == 7
        assert bounds(segments)[0] == (0.0, 0.5)
        assert bounds(segments)[-1] == (1.5, 2.0)

    def test_telephonic_counts(self, telephonic_scales):
        segments = segment_all_scales([TimeInterval(0.0, 3.0)], telephonic_scales)
        assert segments.segment_counts() == [3, 4, 5, 7, 11]

    def test_last_window_clipped_to_region(self):
        segments = uniform_segments(TimeInterval(0.0, 1.2), 1.0, 0.5)
        assert bounds(segments) == [(0.0, 1.0), (0.5, 1.2)]

    def test_region_shorter_than_window(self):
        segments = uniform_segments(TimeInterval(2.0, 2.3), 1.0, 0.5)
        assert bounds(segments) == [(2.0, 2.3)]

    def test_sliver_folded_into_previous(self):
        segments = uniform_segments(TimeInterval(0.0, 1.95), 1.0, 0.9)
        assert bounds(segments) == [(0.0, 1.0), (0.9, 1.95)]

    def test_segments_stay_inside_region(self, rng):
        for _ in range(50):
            onset = float(rng.uniform(0, 5))
            region = TimeInterval(onset, onset + float(rng.uniform(0.05, 8)))
            window = float(rng.uniform(0.2, 2))
            hop = float(rng.uniform(0.1, 1)) * window
            segments = uniform_segments(region, window, hop)
            assert segments[0].onset == region.onset
            assert segments[-1].offset == region.offset
            assert all(region.onset <= s.onset < s.offset <= region.offset for s in segments)
            assert all(s.duration <= max(window, 2 * hop) + 1e-9 for s in segments)

    @pytest.mark.parametrize('window, hop', [(0.0, 0.1), (1.0, 0.0), (1.0, 1.5)])
    def test_rejects_bad_geometry(self, window, hop):
        with pytest.raises(SegmentationError):
            uniform_segments(TimeInterval(0.0, 1.0), window, hop)


class TestGrouping:
    def test_matches_brute_force(self, rng):
        base = uniform_segments(TimeInterval(0.0, 7.3), 0.5, 0.25)
        coarse = uniform_segments(TimeInterval(0.0, 7.3), 1.5, 0.75)
        groups = group_scales(base, coarse)
        for i, segment in enumerate(base):
            distances = [abs(segment.center() - c.center()) for c in coarse]
            assert groups[i] == int(np.argmin(distances))

    def test_tie_goes_to_lower_index(self):
        base = [TimeInterval(0.5, 1.5)]
        coarse = [TimeInterval(0.0, 1.0), TimeInterval(1.0, 2.0)]
        assert group_scales(base, coarse).tolist() == [0]

    def test_empty_coarse_scale(self):
        with pytest.raises(ScaleMismatchError):
            group_scales([TimeInterval(0.0, 0.5)], [])


def random_regions(rng):
    regions = []
    cursor = float(rng.uniform(0, 1))
    for _ in range(int(rng.integers(1, 4))):
        onset = cursor
        cursor = onset + float(rng.uniform(0.1, 6))
        regions.append(TimeInterval(onset, cursor))
        cursor += float(rng.uniform(0.05, 2))
    return regions


def test_grouping_matches_exhaustive_search_on_random_layouts(rng):
    for _ in range(1000):
        windows = np.sort(rng.uniform(0.3, 3.0, size=int(rng.integers(2, 5))))[::-1]
        scales = ScaleConfig.from_windows(windows)
        segments = segment_all_scales(random_regions(rng), scales)
        base_centers = np.array([s.center() for s in segments.base_segments])
        for k in range(scales.num_scales - 1):
            coarse_centers = [s.center() for s in segments.per_scale_segments[k]]
            for i, center in enumerate(base_centers):
                distances = [abs(center - c) for c in coarse_centers]
                assert segments.group_map[i, k] == distances.index(min(distances))


class TestSegmentAllScales:
    def test_group_map_and_spans(self, telephonic_scales):
        regions = [TimeInterval(0.0, 3.0), TimeInterval(4.0, 5.1)]
        segments = segment_all_scales(regions, telephonic_scales)
        assert segments.group_map.shape == (segments.num_steps, 5)
        assert segments.group_map[:, -1].tolist() == list(range(segments.num_steps))

        spans = segments.base_spans
        assert spans.shape == (segments.num_steps, 2)
        assert np.all(spans[:, 1] > spans[:, 0])
        covered = float(np.sum(spans[:, 1] - spans[:, 0]))
        assert covered == pytest.approx(3.0 + 1.1)
        # spans of one region tile it without gaps
        first_region = spans[spans[:, 0] < 3.0]
        assert first_region[0, 0] == 0.0
        assert first_region[-1, 1] == 3.0
        assert np.allclose(first_region[1:, 0], first_region[:-1, 1])

    def test_no_speech(self):
        segments = segment_all_scales([], ScaleConfig.from_windows([1.0, 0.5]))
        assert segments.num_steps == 0
        assert segments.base_spans.shape == (0, 2)

    def test_rejects_overlapping_regions(self, small_scales):
        with pytest.raises(SegmentationError):
            segment_all_scales([TimeInterval(0.0, 2.0), TimeInterval(1.0, 3.0)], small_scales)


def test_speech_regions_are_the_union():
    timeline = SpeakerTimelineFactory(speech={'A': [(0.0, 2.0), (5.0, 6.0)], 'B': [(1.5, 3.0)]})
    assert speech_regions(timeline) == [TimeInterval(0.0, 3.0), TimeInterval(5.0, 6.0)]


def test_step_activity_joins_consecutive_steps():
    spans = np.array([[0.0, 0.5], [0.5, 1.0], [1.0, 1.5], [1.5, 2.0]])
    active = np.array([[True, True, False, True], [False, True, True, False]])
    timeline = step_activity_to_timeline(active, spans, ['x', 'y'], session_id='s')
    assert timeline.intervals_for('x') == [TimeInterval(0.0, 1.0), TimeInterval(1.5, 2.0)]
    assert timeline.intervals_for('y') == [TimeInterval(0.5, 1.5)]
