"""
RTTM reading and writing, and diarization error rate with an optimal
one-to-one speaker mapping.

Scoring works on exact region boundaries rather than frames: the union of
all reference, hypothesis and collar edges splits the timeline into regions
inside which the set of active speakers is constant.
"""
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import merge_speaker_intervals
from .exceptions import ConfigError, EmptyReferenceError, RttmParseError, UnmatchedSessionError

logger = logging.getLogger(__name__)

RTTM_FIELDS = 10
# Record types other than SPEAKER that carry no speaker turns
RTTM_OTHER_TYPES = frozenset({
    'SPKR-INFO', 'SEGMENT', 'LEXEME', 'NON-LEX', 'NON-SPEECH', 'NOSCORE', 'NO_RT_METADATA', 'SU', 'CB', 'IP', 'EDIT',
    'FILLER', 'A/P',
})


@dataclass(frozen=True)
class EvalSetup:
    collar: float = 0.0
    ignore_overlap: bool = False

    def __post_init__(self):
        if self.collar < 0:
            raise ConfigError(f"collar must be >= 0, got {self.collar}")


SETUPS = {
    'forgiving': EvalSetup(collar=0.25, ignore_overlap=True),
    'full': EvalSetup(collar=0.0, ignore_overlap=False),
}


@dataclass(frozen=True)
class DerBreakdown:
    missed_speech: float
    false_alarm: float
    speaker_confusion: float
    total_reference: float

    @property
    def der(self):
        return (self.missed_speech + self.false_alarm + self.speaker_confusion) / self.total_reference

    def as_dict(self):
        return {**asdict(self), 'der': self.der}


# ---------------------------------------------------------------------------
# RTTM
# ---------------------------------------------------------------------------

def parse_rttm(text):
    """Map of session id -> SpeakerTimeline from RTTM text"""
    entries = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith(';'):
            continue
        if fields[0] in RTTM_OTHER_TYPES:
            continue
        if fields[0] != 'SPEAKER':
            raise RttmParseError(line_number, f"unknown record type {fields[0]!r}")
        if len(fields) != RTTM_FIELDS:
            raise RttmParseError(line_number, f"expected {RTTM_FIELDS} fields, found {len(fields)}")
        session_id, speaker = fields[1], fields[7]
        try:
            onset, duration = float(fields[3]), float(fields[4])
        except ValueError:
            raise RttmParseError(line_number, f"bad onset/duration {fields[3]!r} {fields[4]!r}") from None
        if duration < 0:
            raise RttmParseError(line_number, f"negative duration {duration}")
        if onset < 0:
            raise RttmParseError(line_number, f"negative onset {onset}")
        if duration == 0:
            logger.warning("line %d: skipping zero-duration segment of %s", line_number, speaker)
            continue
        entries.setdefault(session_id, []).append((speaker, (onset, onset + duration)))
    return {
        session_id: merge_speaker_intervals(session_entries, session_id=session_id)
        for session_id, session_entries in entries.items()
    }


def load_rttm(path):
    path = Path(path)
    try:
        return parse_rttm(path.read_text())
    except RttmParseError as exc:
        raise RttmParseError(exc.line_number, f"{path}: {exc.reason}") from None


def emit_rttm(hypothesis):
    """Canonical RTTM text for one timeline, sorted by onset then speaker"""
    lines = []
    for speaker, interval in sorted(hypothesis.entries, key=lambda e: (e[1].onset, e[0], e[1].offset)):
        lines.append(
            f"SPEAKER {hypothesis.session_id} 1 {interval.onset:.3f} {interval.duration:.3f} "
            f"<NA> <NA> {speaker} <NA> <NA>"
        )
    return ''.join(line + '\n' for line in lines)


# ---------------------------------------------------------------------------
# DER
# ---------------------------------------------------------------------------

def optimal_mapping(overlap_matrix):
    """
    One-to-one reference -> hypothesis mapping maximizing the matched
    overlap. Pairs without any overlap are left unmatched.
    """
    overlap = np.asarray(overlap_matrix, dtype=np.float64)
    if overlap.size == 0:
        return {}
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols) if overlap[r, c] > 0}


def _activity(timeline, speakers, points):
    """(speakers x points) bool: speaker active at each time point"""
    active = np.zeros((len(speakers), len(points)), dtype=bool)
    for s, speaker in enumerate(speakers):
        intervals = timeline.intervals_for(speaker)
        starts = np.array([interval.onset for interval in intervals])
        ends = np.array([interval.offset for interval in intervals])
        index = np.searchsorted(starts, points, side='right') - 1
        inside = index >= 0
        active[s, inside] = points[inside] < ends[index[inside]]
    return active


def der(ref, hyp, setup):
    ref_speakers = ref.speakers
    hyp_speakers = hyp.speakers
    ref_edges = np.array(sorted({t for _, i in ref.entries for t in (i.onset, i.offset)}))
    edges = set(ref_edges) | {t for _, i in hyp.entries for t in (i.onset, i.offset)}
    if setup.collar > 0:
        edges |= {max(0.0, t - setup.collar) for t in ref_edges} | {t + setup.collar for t in ref_edges}
    bounds = np.array(sorted(edges))
    if len(bounds) < 2:
        raise EmptyReferenceError(f"{ref.session_id}: no reference speech to score")

    durations = np.diff(bounds)
    midpoints = (bounds[:-1] + bounds[1:]) / 2
    ref_active = _activity(ref, ref_speakers, midpoints)
    hyp_active = _activity(hyp, hyp_speakers, midpoints)
    ref_count = ref_active.sum(axis=0)

    scored = durations > 0
    if setup.collar > 0 and len(ref_edges):
        near = np.abs(midpoints[:, None] - ref_edges[None, :]) <= setup.collar
        scored &= ~near.any(axis=1)
    if setup.ignore_overlap:
        scored &= ref_count < 2

    weight = durations * scored
    total_reference = float(np.sum(weight * ref_count))
    if total_reference <= 0:
        raise EmptyReferenceError(f"{ref.session_id}: no reference speech left after exclusions")

    overlap = (ref_active * weight) @ hyp_active.T.astype(np.float64)
    mapping = optimal_mapping(overlap)
    correct = np.zeros(len(midpoints))
    for r, h in mapping.items():
        correct += ref_active[r] & hyp_active[h]
    hyp_count = hyp_active.sum(axis=0)

    missed = float(np.sum(weight * np.maximum(ref_count - hyp_count, 0)))
    false_alarm = float(np.sum(weight * np.maximum(hyp_count - ref_count, 0)))
    confusion = float(np.sum(weight * (np.minimum(ref_count, hyp_count) - correct)))
    return DerBreakdown(missed, false_alarm, confusion, total_reference)


def aggregate(breakdowns):
    """Corpus totals over a mapping of session id -> DerBreakdown"""
    totals = np.zeros(4)
    for session_id in sorted(breakdowns):
        b = breakdowns[session_id]
        totals += (b.missed_speech, b.false_alarm, b.speaker_confusion, b.total_reference)
    if totals[3] <= 0:
        raise EmptyReferenceError("no reference speech in the corpus")
    return DerBreakdown(*(float(t) for t in totals))


def score_corpus(references, hypotheses, setup):
    """Per-session breakdowns in session-id order"""
    missing_hyp = set(references) - set(hypotheses)
    missing_ref = set(hypotheses) - set(references)
    if missing_hyp or missing_ref:
        raise UnmatchedSessionError(missing_hyp, missing_ref)
    results = {}
    for session_id in sorted(references):
        results[session_id] = der(references[session_id], hypotheses[session_id], setup)
        logger.debug("%s: DER %.4f", session_id, results[session_id].der)
    return results
