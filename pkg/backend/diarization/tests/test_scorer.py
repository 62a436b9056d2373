import logging
from itertools import permutations

import numpy as np
import pytest

from diarization.core import SpeakerTimeline, TimeInterval, merge_speaker_intervals
from diarization.exceptions import ConfigError, EmptyReferenceError, RttmParseError, UnmatchedSessionError
from diarization.scorer import (
    SETUPS, DerBreakdown, EvalSetup, aggregate, der, emit_rttm, load_rttm, optimal_mapping, parse_rttm, score_corpus,
)

from .factories import SpeakerTimelineFactory

FULL = SETUPS['full']
FORGIVING = SETUPS['forgiving']


def frame_der(ref, hyp, setup, step=0.001):
    """Brute-force DER on 1 ms frames with an exhaustive speaker mapping"""
    end = max(interval.offset for _, interval in ref.entries + hyp.entries) + setup.collar + 0.01
    centers = (np.arange(int(np.ceil(end / step))) + 0.5) * step

    def frames(timeline):
        speakers = timeline.speakers
        active = np.zeros((len(speakers), len(centers)), dtype=bool)
        for s, speaker in enumerate(speakers):
            for interval in timeline.intervals_for(speaker):
                active[s] |= (centers >= interval.onset) & (centers < interval.offset)
        return active

    ref_active, hyp_active = frames(ref), frames(hyp)
    scored = np.ones(len(centers), dtype=bool)
    for _, interval in ref.entries:
        for edge in (interval.onset, interval.offset):
            scored &= np.abs(centers - edge) > setup.collar
    ref_count = ref_active.sum(axis=0)
    hyp_count = hyp_active.sum(axis=0)
    if setup.ignore_overlap:
        scored &= ref_count < 2

    best = 0
    slots = list(range(len(hyp_active))) + [None] * len(ref_active)
    for assignment in set(permutations(slots, len(ref_active))):
        matched = sum(
            int(np.sum(ref_active[r] & hyp_active[h] & scored)) for r, h in enumerate(assignment) if h is not None
        )
        best = max(best, matched)
    total = np.sum(ref_count * scored)
    errors = (
        np.sum(np.maximum(ref_count - hyp_count, 0) * scored)
        + np.sum(np.maximum(hyp_count - ref_count, 0) * scored)
        + np.sum(np.minimum(ref_count, hyp_count) * scored) - best
    )
    return errors / total if total else None


def random_timeline(rng, session_id, prefix):
    entries = []
    for s in range(int(rng.integers(1, 4))):
        for _ in range(int(rng.integers(1, 5))):
            onset = round(float(rng.uniform(0, 18)), 2)
            offset = round(onset + float(rng.uniform(0.05, 4)), 2)
            if offset > onset:
                entries.append((f"{prefix}{s}", (onset, offset)))
    return merge_speaker_intervals(entries, session_id=session_id)


class TestRttm:
    def test_parse_line(self):
        parsed = parse_rttm('SPEAKER s1 1 0.50 1.25 <NA> <NA> spkA <NA> <NA>\n')
        assert parsed['s1'].intervals_for('spkA') == [TimeInterval(0.5, 1.75)]

    def test_empty_file(self):
        assert parse_rttm('') == {}

    def test_comments_whitespace_and_other_types(self):
        text = (
            ';; header comment\n'
            '\n'
            'SPKR-INFO s1 1 <NA> <NA> <NA> unknown spkA <NA> <NA>\n'
            '  SPEAKER   s1 1 0.00  1.00 <NA> <NA> spkA <NA> <NA>  \n'
            'SPEAKER s2 1 2.00 1.00 <NA> <NA> spkB <NA> <NA>\n'
        )
        parsed = parse_rttm(text)
        assert sorted(parsed) == ['s1', 's2']
        assert parsed['s2'].intervals_for('spkB') == [TimeInterval(2.0, 3.0)]

    def test_unknown_record_type(self):
        with pytest.raises(RttmParseError, match="unknown record type 'garbage'") as excinfo:
            parse_rttm('garbage line here\nSPEAKER s 1 0 1 <NA> <NA> a <NA> <NA>\n')
        assert excinfo.value.line_number == 1

    def test_lowercase_speaker_is_not_a_speaker_line(self):
        with pytest.raises(RttmParseError) as excinfo:
            parse_rttm('SPEAKER s 1 0 1 <NA> <NA> a <NA> <NA>\nspeaker s 1 1 1 <NA> <NA> b <NA> <NA>\n')
        assert excinfo.value.line_number == 2

    def test_wrong_field_count(self):
        with pytest.raises(RttmParseError) as excinfo:
            parse_rttm('SPEAKER s1 1 0.0 1.0 <NA> <NA> spkA <NA> <NA>\nSPEAKER s1 1 0.0 1.0 <NA> <NA> spkA <NA>\n')
        assert excinfo.value.line_number == 2
        assert 'line 2' in str(excinfo.value)

    @pytest.mark.parametrize('onset, duration', [('0.0', '-1.0'), ('-1.0', '1.0'), ('zero', '1.0')])
    def test_bad_numbers(self, onset, duration):
        with pytest.raises(RttmParseError):
            parse_rttm(f'SPEAKER s1 1 {onset} {duration} <NA> <NA> spkA <NA> <NA>')

    def test_zero_duration_is_skipped(self, caplog):
        with caplog.at_level(logging.WARNING, logger='diarization.scorer'):
            parsed = parse_rttm('SPEAKER s1 1 1.0 0.0 <NA> <NA> spkA <NA> <NA>\n')
        assert parsed == {}
        assert 'zero-duration' in caplog.text

    def test_load_names_the_file(self, tmp_path):
        path = tmp_path / 'broken.rttm'
        path.write_text('SPEAKER s1 1 0.0\n')
        with pytest.raises(RttmParseError, match='broken.rttm'):
            load_rttm(path)

    def test_emit_format(self):
        timeline = SpeakerTimelineFactory(session_id='s1', speech={'spkB': [(2.0, 3.0)], 'spkA': [(0.5, 1.75)]})
        assert emit_rttm(timeline) == (
            'SPEAKER s1 1 0.500 1.250 <NA> <NA> spkA <NA> <NA>\n'
            'SPEAKER s1 1 2.000 1.000 <NA> <NA> spkB <NA> <NA>\n'
        )

    def test_emit_overlap_and_empty(self):
        timeline = SpeakerTimelineFactory(session_id='s', speech={'a': [(0.0, 2.0)], 'b': [(1.0, 3.0)]})
        assert len(emit_rttm(timeline).splitlines()) == 2
        assert emit_rttm(SpeakerTimeline('s')) == ''

    def test_emit_then_parse_keeps_speech(self, rng):
        timeline = random_timeline(rng, 'r', 'spk')
        parsed = parse_rttm(emit_rttm(timeline))['r']
        assert parsed.speakers == timeline.speakers
        for (speaker, interval), (parsed_speaker, parsed_interval) in zip(timeline.entries, parsed.entries):
            assert speaker == parsed_speaker
            assert parsed_interval.onset == pytest.approx(interval.onset, abs=1e-3)
            assert parsed_interval.offset == pytest.approx(interval.offset, abs=1e-3)


class TestMapping:
    def test_diagonal(self):
        assert optimal_mapping(np.diag([3.0, 4.0, 5.0]) + 0.1) == {0: 0, 1: 1, 2: 2}

    def test_two_by_two(self):
        assert optimal_mapping([[5.0, 1.0], [2.0, 10.0]]) == {0: 0, 1: 1}

    def test_single_reference(self):
        assert optimal_mapping([[3.0, 7.0, 2.0]]) == {0: 1}

    def test_zero_overlap_stays_unmatched(self):
        assert optimal_mapping([[4.0, 0.0], [0.0, 0.0]]) == {0: 0}
        assert optimal_mapping(np.zeros((0, 2))) == {}


class TestDer:
    def test_identical_is_zero(self, rng):
        ref = random_timeline(rng, 's', 'spk')
        for setup in (FULL, FORGIVING):
            try:
                assert der(ref, ref, setup).der == 0.0
            except EmptyReferenceError:
                pass

    def test_split_speaker(self):
        ref = SpeakerTimelineFactory(speech={'A': [(0.0, 10.0)]})
        hyp = SpeakerTimelineFactory(speech={'spk1': [(0.0, 5.0)], 'spk2': [(5.0, 10.0)]})
        result = der(ref, hyp, FULL)
        assert result.speaker_confusion == pytest.approx(5.0)
        assert result.der == pytest.approx(0.5)

    def test_collar_forgives_boundary_miss(self):
        ref = SpeakerTimelineFactory(speech={'A': [(0.0, 10.0)]})
        hyp = SpeakerTimelineFactory(speech={'spk1': [(0.2, 10.0)]})
        assert der(ref, hyp, EvalSetup(collar=0.25)).der == 0.0
        assert der(ref, hyp, FULL).missed_speech == pytest.approx(0.2)

    def test_overlap_handling(self):
        ref = SpeakerTimelineFactory(speech={'A': [(0.0, 6.0)], 'B': [(4.0, 10.0)]})
        hyp = SpeakerTimelineFactory(speech={'x': [(0.0, 5.0)], 'y': [(5.0, 10.0)]})
        full = der(ref, hyp, FULL)
        assert full.total_reference == pytest.approx(12.0)
        assert full.missed_speech == pytest.approx(2.0)
        ignored = der(ref, hyp, EvalSetup(ignore_overlap=True))
        assert ignored.total_reference == pytest.approx(8.0)
        assert ignored.der == 0.0

    def test_false_alarm(self):
        ref = SpeakerTimelineFactory(speech={'A': [(0.0, 4.0)]})
        hyp = SpeakerTimelineFactory(speech={'x': [(0.0, 4.0)], 'y': [(5.0, 6.0)]})
        result = der(ref, hyp, FULL)
        assert result.false_alarm == pytest.approx(1.0)
        assert result.der == pytest.approx(0.25)

    def test_relabel_invariance(self, rng):
        ref = random_timeline(rng, 's', 'ref')
        hyp = random_timeline(rng, 's', 'hyp')
        renamed = merge_speaker_intervals(
            ((f"other-{speaker[::-1]}", interval) for speaker, interval in hyp.entries), session_id='s'
        )
        original, relabeled = der(ref, hyp, FULL).as_dict(), der(ref, renamed, FULL).as_dict()
        assert relabeled == pytest.approx(original)

    def test_empty_reference(self):
        with pytest.raises(EmptyReferenceError):
            der(SpeakerTimeline('s'), SpeakerTimeline('s'), FULL)
        ref = SpeakerTimelineFactory(speech={'A': [(0.0, 0.3)]})
        with pytest.raises(EmptyReferenceError):
            der(ref, ref, FORGIVING)

    def test_negative_collar(self):
        with pytest.raises(ConfigError):
            EvalSetup(collar=-0.1)

    @pytest.mark.parametrize('setup', [FULL, FORGIVING], ids=['full', 'forgiving'])
    def test_matches_frame_scorer(self, setup):
        rng = np.random.default_rng(2024)
        compared = 0
        for index in range(100):
            ref = random_timeline(rng, f"s{index}", 'ref')
            hyp = random_timeline(rng, f"s{index}", 'hyp')
            expected = frame_der(ref, hyp, setup)
            if expected is None:
                with pytest.raises(EmptyReferenceError):
                    der(ref, hyp, setup)
                continue
            assert der(ref, hyp, setup).der == pytest.approx(expected, abs=0.002)
            compared += 1
        assert compared >= 80


class TestCorpus:
    def test_aggregate_sums_components(self):
        total = aggregate({
            'a': DerBreakdown(1.0, 0.0, 1.0, 10.0),
            'b': DerBreakdown(0.0, 2.0, 0.0, 30.0),
        })
        assert total == DerBreakdown(1.0, 2.0, 1.0, 40.0)
        assert total.der == pytest.approx(0.1)

    def test_score_corpus_orders_sessions(self):
        ref = {
            'b': SpeakerTimelineFactory(session_id='b', speech={'A': [(0.0, 2.0)]}),
            'a': SpeakerTimelineFactory(session_id='a', speech={'A': [(0.0, 1.0)]}),
        }
        results = score_corpus(ref, ref, FULL)
        assert list(results) == ['a', 'b']
        assert all(result.der == 0.0 for result in results.values())

    def test_unmatched_sessions(self):
        ref = {'a': SpeakerTimelineFactory(), 'b': SpeakerTimelineFactory()}
        hyp = {'a': SpeakerTimelineFactory(), 'c': SpeakerTimelineFactory()}
        with pytest.raises(UnmatchedSessionError) as excinfo:
            score_corpus(ref, hyp, FULL)
        assert excinfo.value.missing_hypotheses == ['b']
        assert str(excinfo.value) == 'no hypothesis for: b; no reference for: c'
