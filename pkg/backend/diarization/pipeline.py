"""
Session-level steps shared by the management commands: corpus generation,
directory loading, per-session diarization and report records.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clusterer import cluster_session
from .core import SpeakerTimeline, merge_speaker_intervals
from .exceptions import ArchiveError, ScaleMismatchError, TrainingDataError
from .msdd import TrainingSession, hypothesis_speaker, infer
from .scorer import emit_rttm, load_rttm
from .segmenter import step_activity_to_timeline
from .synthembed import gen_session, load_archive, save_archive

logger = logging.getLogger(__name__)

CORPUS_MANIFEST = 'corpus.jsonl'
RUN_REPORT = 'report.jsonl'


@dataclass(frozen=True)
class DiarizationOutcome:
    session_id: str
    hypothesis: object
    record: dict


def run_parallel(func, items, jobs=1):
    """Map func over items with up to `jobs` threads, keeping input order"""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(func, items))


def write_jsonl(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w') as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + '\n')
    return path


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def corpus_plan(corpus_cfg):
    """
    (session_id, seed, num_speakers) for every session. Seeds are spawned from
    the corpus seed, so a session does not depend on how many follow it.
    """
    low, high = corpus_cfg.num_speakers
    children = np.random.SeedSequence(corpus_cfg.seed).spawn(corpus_cfg.num_sessions)
    width = max(3, len(str(corpus_cfg.num_sessions - 1)))
    plan = []
    for index, child in enumerate(children):
        seed = int(child.generate_state(1)[0])
        num_speakers = int(np.random.default_rng(child).integers(low, high + 1))
        plan.append((f"session-{index:0{width}d}", seed, num_speakers))
    return plan


def synthesize_session(out_dir, corpus_cfg, scales, session_id, seed, num_speakers):
    session = gen_session(corpus_cfg.session_config(num_speakers, seed), scales, session_id=session_id)
    stem = Path(out_dir) / session_id
    save_archive(stem, session.embeddings)
    (Path(out_dir) / f"{session_id}.rttm").write_text(emit_rttm(session.timeline))
    return {
        'session_id': session_id,
        'seed': seed,
        'num_speakers': num_speakers,
        'base_steps': session.embeddings.num_steps,
        'speech_seconds': round(session.timeline.speech_duration(), 6),
    }


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def archive_stems(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ArchiveError('missing_file', f"not a directory: {directory}")
    return sorted(path.with_suffix('') for path in directory.glob('*.manifest'))


def load_sessions(directory, scales=None, jobs=1):
    """Every archive in a directory, optionally checked against the configured scales"""
    sessions = run_parallel(load_archive, archive_stems(directory), jobs)
    if scales is not None:
        for session in sessions:
            check_scales(session, scales)
    return sessions


def check_scales(session, scales):
    found = session.scale_config
    if (found.windows, found.hops) != (scales.windows, scales.hops):
        raise ScaleMismatchError(
            f"archive {session.session_id} has windows {list(found.windows)} / hops {list(found.hops)}, "
            f"config has {list(scales.windows)} / {list(scales.hops)}"
        )


def load_reference_dir(directory):
    """Every *.rttm file in a directory merged into one session-id map"""
    references = {}
    directory = Path(directory)
    if not directory.is_dir():
        raise ArchiveError('missing_file', f"not a directory: {directory}")
    for path in sorted(directory.glob('*.rttm')):
        parsed = load_rttm(path)
        if not parsed:
            # no speech: the file still stands for its session
            parsed = {path.stem: SpeakerTimeline(path.stem)}
        for session_id, timeline in parsed.items():
            if session_id in references:
                timeline = merge_speaker_intervals(
                    references[session_id].entries + timeline.entries, session_id=session_id
                )
            references[session_id] = timeline
    return references


def load_training_sessions(directory, scales, jobs=1):
    sessions = load_sessions(directory, scales, jobs)
    references = load_reference_dir(directory)
    paired = []
    for session in sessions:
        timeline = references.get(session.session_id)
        if timeline is None:
            raise TrainingDataError(f"session {session.session_id} has no reference RTTM in {directory}")
        paired.append(TrainingSession(session, timeline))
    return paired


# ---------------------------------------------------------------------------
# Diarization
# ---------------------------------------------------------------------------

def scale_weight_summary(weights):
    """Per-scale mean and standard deviation of the dynamic scale weights"""
    if weights is None:
        return None
    flat = np.asarray(weights).reshape(-1, np.shape(weights)[-1])
    return {
        'mean': [round(float(v), 6) for v in flat.mean(axis=0)],
        'std': [round(float(v), 6) for v in flat.std(axis=0)],
    }


def clustering_timeline(session, clustering):
    """One speaker per base step, taken from the clustering labels"""
    active = np.zeros((clustering.num_speakers, session.num_steps), dtype=bool)
    active[clustering.labels, np.arange(session.num_steps)] = True
    names = [hypothesis_speaker(s) for s in range(clustering.num_speakers)]
    return step_activity_to_timeline(active, session.segments.base_spans, names, session.session_id)


def diarize_session(session, config, mode='clustering', params=None):
    clustering = cluster_session(session, **config.clustering.as_kwargs())
    if mode == 'msdd':
        grid, hypothesis = infer(
            session, clustering, params,
            threshold=config.msdd.threshold, max_speakers=config.clustering.max_speakers,
        )
        weights = grid.scale_weights
    else:
        hypothesis = clustering_timeline(session, clustering)
        weights = None
    record = {
        'session_id': session.session_id,
        'mode': mode,
        'num_speakers': clustering.num_speakers,
        'p_neighbors': clustering.p_neighbors,
        'clustering_weights': list(clustering.scale_weights),
        'scale_weights': scale_weight_summary(weights),
    }
    logger.info(
        "%s: %d speakers (p=%d), %d hypothesis segments",
        session.session_id, clustering.num_speakers, clustering.p_neighbors, len(hypothesis),
    )
    return DiarizationOutcome(session.session_id, hypothesis, record)


def write_hypothesis(out_dir, outcome):
    path = Path(out_dir) / f"{outcome.session_id}.rttm"
    path.write_text(emit_rttm(outcome.hypothesis))
    return path
