"""
Embedding providers: a seeded synthetic session generator and the on-disk
archive for precomputed multi-scale embeddings.

The generator models the resolution/fidelity trade-off of real extractors:
each segment embedding is the time-weighted mix of the active speakers'
centroids plus Gaussian noise that shrinks as the window grows.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import TimeInterval, ScaleConfig, as_embedding_matrix, merge_speaker_intervals
from .exceptions import ArchiveError, SynthesisError
from .segmenter import build_segment_set, segment_all_scales, speech_regions

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = 'msdiar-embeddings'
ARCHIVE_VERSION = 1
PAYLOAD_DTYPE = '<f4'
MANIFEST_KEYS = ('session_id', 'dim', 'windows', 'hops', 'regions', 'scales')
SCALE_ENTRY_KEYS = ('window', 'hop', 'rows', 'intervals')

MAX_SPEAKERS = 8

# Turn model
MEAN_TURN_SECONDS = 3.0
TURN_SHAPE = 4.0
MIN_TURN_SECONDS = 0.6
PAUSE_PROBABILITY = 0.2
PAUSE_RANGE = (0.2, 1.0)
# Overlap per boundary stays below half of the shorter neighbouring turn,
# so at most two speakers are ever active at once.
MAX_OVERLAP_SHARE = 0.45


@dataclass(frozen=True)
class SynthConfig:
    num_speakers: int = 2
    dim: int = 192
    session_duration: float = 60.0
    overlap_fraction: float = 0.15
    base_noise_sigma: float = 0.05
    scale_noise_exponent: float = 1.0
    min_centroid_angle: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_speakers <= MAX_SPEAKERS:
            raise SynthesisError(
                f"num_speakers must be between 1 and {MAX_SPEAKERS}, got {self.num_speakers}"
            )
        if self.dim < 1:
            raise SynthesisError(f"dim must be positive, got {self.dim}")
        if not self.session_duration > 0:
            raise SynthesisError(f"session_duration must be positive, got {self.session_duration}")
        if not 0 <= self.overlap_fraction < 0.5:
            raise SynthesisError(f"overlap_fraction must be in [0, 0.5), got {self.overlap_fraction}")
        if self.base_noise_sigma < 0:
            raise SynthesisError(f"base_noise_sigma must be >= 0, got {self.base_noise_sigma}")
        if not 0 <= self.min_centroid_angle < 180:
            raise SynthesisError(
                f"min_centroid_angle must be in [0, 180), got {self.min_centroid_angle}"
            )


@dataclass(frozen=True)
class SessionEmbeddings:
    """Multi-scale segments of one session with one embedding row per segment"""
    session_id: str
    segments: object
    embeddings: tuple

    @property
    def scale_config(self):
        return self.segments.scale_config

    @property
    def dim(self):
        return self.embeddings[0].shape[1]

    @property
    def num_steps(self):
        return self.segments.num_steps

    def base_aligned(self):
        """(steps x K x dim) array: u_{i,k} for every base step i and scale k"""
        stacked = [
            np.asarray(emb, dtype=np.float64)[self.segments.group_map[:, k]]
            for k, emb in enumerate(self.embeddings)
        ]
        return np.stack(stacked, axis=1)


@dataclass(frozen=True)
class SynthSession:
    timeline: object
    embeddings: SessionEmbeddings
    centroids: np.ndarray
    speaker_names: tuple

    def __iter__(self):
        return iter((self.timeline, self.embeddings.segments, self.embeddings.embeddings))


def speaker_name(index):
    return f"spk{index}"


def draw_centroids(rng, num_speakers, dim, min_angle, max_attempts=2000):
    """Unit-norm centroids whose pairwise angles are all at least `min_angle` degrees"""
    max_cosine = math.cos(math.radians(min_angle))
    centroids = []
    attempts = 0
    while len(centroids) < num_speakers:
        if attempts >= max_attempts:
            raise SynthesisError(
                f"cannot place {num_speakers} centroids in {dim} dimensions "
                f"with pairwise angle >= {min_angle} degrees"
            )
        attempts += 1
        candidate = rng.standard_normal(dim)
        candidate /= np.linalg.norm(candidate)
        if all(float(candidate @ other) <= max_cosine for other in centroids):
            centroids.append(candidate)
    return np.array(centroids)


def _speaker_order(rng, num_speakers, num_turns):
    order = list(rng.permutation(num_speakers))
    while len(order) < num_turns:
        if num_speakers == 1:
            order.append(0)
        else:
            choices = [s for s in range(num_speakers) if s != order[-1]]
            order.append(choices[rng.integers(len(choices))])
    return order[:num_turns]


def sample_turns(rng, cfg):
    """
    Alternating speaker turns with pauses and two-speaker overlaps whose total
    matches cfg.overlap_fraction of the speech time.
    """
    overlap_fraction = cfg.overlap_fraction if cfg.num_speakers > 1 else 0.0
    if cfg.overlap_fraction > 0 and cfg.num_speakers == 1:
        logger.warning("single-speaker session cannot overlap; ignoring overlap_fraction")

    durations = []
    while sum(durations) < 1.5 * cfg.session_duration + MEAN_TURN_SECONDS or len(durations) < cfg.num_speakers:
        turn = rng.gamma(TURN_SHAPE, MEAN_TURN_SECONDS / TURN_SHAPE)
        durations.append(max(MIN_TURN_SECONDS, float(turn)))
    num_turns = len(durations)
    order = _speaker_order(rng, cfg.num_speakers, num_turns)

    is_pause = rng.random(num_turns - 1) < PAUSE_PROBABILITY
    pauses = rng.uniform(*PAUSE_RANGE, size=num_turns - 1)
    jitter = rng.uniform(0.75, 1.0, size=num_turns - 1)
    capacity = np.array([
        0.0 if is_pause[i] else min(durations[i], durations[i + 1]) * jitter[i]
        for i in range(num_turns - 1)
    ])

    def layout(share):
        entries = []
        onset = 0.0
        for i in range(num_turns):
            if onset >= cfg.session_duration:
                break
            offset = min(onset + durations[i], cfg.session_duration)
            if offset - onset >= 0.1:
                entries.append((speaker_name(order[i]), TimeInterval(onset, offset)))
            if i < num_turns - 1:
                step = pauses[i] if is_pause[i] else -share * capacity[i]
                onset = onset + durations[i] + step
        return entries

    if overlap_fraction == 0 or capacity.sum() == 0:
        return layout(0.0)

    wanted = overlap_fraction / (1 + overlap_fraction) * sum(durations)
    share = min(wanted / capacity.sum(), MAX_OVERLAP_SHARE)
    # Clipping at the session end shifts the realised fraction; correct it
    # with a few multiplicative updates.
    for _ in range(8):
        realised = overlap_fraction_of(merge_speaker_intervals(layout(share)))
        if realised <= 0 or abs(realised - overlap_fraction) <= 0.01 * overlap_fraction:
            break
        share = min(share * overlap_fraction / realised, MAX_OVERLAP_SHARE)
    if share >= MAX_OVERLAP_SHARE:
        logger.warning(
            "overlap_fraction %.3f is not reachable with this turn model; capped", overlap_fraction
        )
    return layout(share)


def segment_mixtures(segments, timeline, centroids):
    """
    Noiseless embedding of every segment: the unit-normalised mix of the
    active speakers' centroids weighted by their speech time in the segment.
    """
    onsets = np.array([segment.onset for segment in segments])
    offsets = np.array([segment.offset for segment in segments])
    weights = np.zeros((len(segments), len(centroids)))
    for s in range(len(centroids)):
        intervals = timeline.intervals_for(speaker_name(s))
        if not intervals:
            continue
        starts = np.array([interval.onset for interval in intervals])
        ends = np.array([interval.offset for interval in intervals])
        overlap = np.minimum(offsets[:, None], ends[None, :]) - np.maximum(onsets[:, None], starts[None, :])
        weights[:, s] = np.clip(overlap, 0.0, None).sum(axis=1)

    totals = weights.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise SynthesisError("segment without any speech")
    mixtures = (weights / totals) @ centroids
    norms = np.linalg.norm(mixtures, axis=1, keepdims=True)
    dominant = centroids[np.argmax(weights, axis=1)]
    return np.where(norms > 1e-12, mixtures / np.maximum(norms, 1e-12), dominant)


def scale_noise_sigma(cfg, scales, k):
    return cfg.base_noise_sigma * (scales.base_window / scales.windows[k]) ** cfg.scale_noise_exponent


def gen_session(cfg, scales, session_id=None):
    """
    Generate one synthetic session: reference timeline, multi-scale segments
    and per-scale embeddings. Fully determined by cfg.seed.
    """
    rng = np.random.default_rng(cfg.seed)
    session_id = session_id or f"synth-{cfg.seed}"

    centroids = draw_centroids(rng, cfg.num_speakers, cfg.dim, cfg.min_centroid_angle)
    timeline = merge_speaker_intervals(sample_turns(rng, cfg), session_id=session_id)
    segments = segment_all_scales(speech_regions(timeline), scales)

    embeddings = []
    for k, scale_segments in enumerate(segments.per_scale_segments):
        mixtures = segment_mixtures(scale_segments, timeline, centroids)
        sigma = scale_noise_sigma(cfg, scales, k)
        noisy = mixtures + rng.normal(0.0, sigma, size=mixtures.shape) if sigma > 0 else mixtures
        noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
        embeddings.append(noisy.astype(np.float32))

    logger.debug(
        "generated %s: %d speakers, %d base steps", session_id, cfg.num_speakers, segments.num_steps
    )
    return SynthSession(
        timeline=timeline,
        embeddings=SessionEmbeddings(session_id, segments, tuple(embeddings)),
        centroids=centroids,
        speaker_names=tuple(speaker_name(s) for s in range(cfg.num_speakers)),
    )


def overlap_fraction_of(timeline):
    """Fraction of speech time during which two or more speakers are active"""
    bounds = sorted({t for _, interval in timeline.entries for t in (interval.onset, interval.offset)})
    speech = overlapped = 0.0
    for start, end in zip(bounds, bounds[1:]):
        middle = (start + end) / 2
        active = sum(1 for _, interval in timeline.entries if interval.onset <= middle < interval.offset)
        if active >= 1:
            speech += end - start
        if active >= 2:
            overlapped += end - start
    return overlapped / speech if speech else 0.0


# ---------------------------------------------------------------------------
# Archive: <stem>.manifest (JSON) + <stem>.emb (float32 little-endian rows)
# ---------------------------------------------------------------------------

def archive_paths(stem):
    stem = Path(stem)
    return stem.with_name(stem.name + '.manifest'), stem.with_name(stem.name + '.emb')


def save_archive(stem, data):
    manifest_path, payload_path = archive_paths(stem)
    scales = data.scale_config
    entries = []
    byte_offset = 0
    payload = []
    for k, (segments, matrix) in enumerate(zip(data.segments.per_scale_segments, data.embeddings)):
        values = np.ascontiguousarray(matrix, dtype=PAYLOAD_DTYPE)
        payload.append(values.tobytes())
        entries.append({
            'window': scales.windows[k],
            'hop': scales.hops[k],
            'rows': int(values.shape[0]),
            'byte_offset': byte_offset,
            'byte_length': values.nbytes,
            'intervals': [[segment.onset, segment.offset] for segment in segments],
        })
        byte_offset += values.nbytes

    manifest = {
        'format': ARCHIVE_FORMAT,
        'version': ARCHIVE_VERSION,
        'session_id': data.session_id,
        'dim': int(data.dim),
        'dtype': PAYLOAD_DTYPE,
        'windows': list(scales.windows),
        'hops': list(scales.hops),
        'regions': [[region.onset, region.offset] for region in data.segments.regions],
        'scales': entries,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + '\n')
    payload_path.write_bytes(b''.join(payload))
    return manifest_path, payload_path


def read_manifest(stem):
    manifest_path, _ = archive_paths(stem)
    if not manifest_path.exists():
        raise ArchiveError('missing_file', f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ArchiveError('corrupt_manifest', f"{manifest_path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get('format') != ARCHIVE_FORMAT:
        raise ArchiveError('corrupt_manifest', f"{manifest_path}: not an embedding archive")
    if manifest.get('version') != ARCHIVE_VERSION:
        raise ArchiveError(
            'unsupported_version',
            f"{manifest_path}: unsupported archive version {manifest.get('version')!r}",
        )
    missing = [key for key in MANIFEST_KEYS if key not in manifest]
    if not missing and not isinstance(manifest['scales'], list):
        missing = ['scales']
    for entry in [] if missing else manifest['scales']:
        entry = entry if isinstance(entry, dict) else {}
        missing = [f"scales[].{key}" for key in SCALE_ENTRY_KEYS if key not in entry]
        if missing:
            break
    if missing:
        raise ArchiveError('corrupt_manifest', f"{manifest_path}: missing {', '.join(missing)}")
    return manifest


def load_archive(stem):
    manifest = read_manifest(stem)
    _, payload_path = archive_paths(stem)
    if not payload_path.exists():
        raise ArchiveError('missing_file', f"missing payload {payload_path}")
    payload = payload_path.read_bytes()

    dim = manifest['dim']
    scales = ScaleConfig.from_windows(manifest['windows'], manifest['hops'])
    if len(manifest['scales']) != scales.num_scales:
        raise ArchiveError(
            'manifest_mismatch',
            f"manifest lists {len(manifest['scales'])} payloads for {scales.num_scales} scales",
        )
    expected = sum(entry['rows'] * dim * 4 for entry in manifest['scales'])
    if len(payload) != expected:
        raise ArchiveError(
            'payload_length_mismatch',
            f"payload length mismatch: expected {expected} bytes, found {len(payload)} in {payload_path}",
        )

    per_scale = []
    embeddings = []
    offset = 0
    for entry in manifest['scales']:
        if len(entry['intervals']) != entry['rows']:
            raise ArchiveError(
                'manifest_mismatch',
                f"scale {entry['window']}: {len(entry['intervals'])} intervals for {entry['rows']} rows",
            )
        length = entry['rows'] * dim * 4
        values = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=entry['rows'] * dim, offset=offset)
        embeddings.append(as_embedding_matrix(values.reshape(entry['rows'], dim).astype(np.float32)))
        per_scale.append([TimeInterval(onset, offset_) for onset, offset_ in entry['intervals']])
        offset += length

    regions = [TimeInterval(onset, offset_) for onset, offset_ in manifest['regions']]
    segments = build_segment_set(scales, per_scale, regions)
    return SessionEmbeddings(manifest['session_id'], segments, tuple(embeddings))
