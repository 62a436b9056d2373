"""
Multi-scale diarization decoder.

A 1-D CNN turns the stacked input embeddings and two speaker profiles into
per-step scale weights; the weighted per-scale cosine similarities form a
context vector per step, and a BiLSTM decodes the context sequence into two
independent sigmoid outputs, one per speaker of the pair.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field, asdict
from itertools import combinations

import numpy as np
from scipy.special import expit

from . import neuralkit as nk
from .clusterer import cluster_session
from .exceptions import ClusteringError, ProfileError, ShapeError, TrainingDataError
from .scorer import optimal_mapping
from .segmenter import step_activity_to_timeline

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.7
VALIDATION_THRESHOLD = 0.5


def hypothesis_speaker(index):
    return f"speaker_{index}"


# ---------------------------------------------------------------------------
# Profiles and inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterProfile:
    """vectors[s, k] is speaker s's mean embedding at scale k; counts[s, k] how many went into it"""
    vectors: np.ndarray
    counts: np.ndarray

    @property
    def num_speakers(self):
        return self.vectors.shape[0]

    def pair(self, first, second):
        return self.vectors[[first, second]]


@dataclass(frozen=True)
class ContextVector:
    per_speaker: np.ndarray
    concatenated: np.ndarray


@dataclass(frozen=True)
class PosteriorGrid:
    """
    Averaged speaker posteriors over base steps. `probabilities` is None for
    single-speaker sessions, which skip pairwise decoding.
    """
    probabilities: np.ndarray
    threshold: float
    pair_outputs: dict = field(default_factory=dict, repr=False)
    scale_weights: np.ndarray = field(default=None, repr=False)


def cluster_average(per_scale_embeddings, labels, group_map, num_speakers=None):
    """
    Mean embedding per speaker and scale. A scale-k segment belongs to
    speaker s when any base step grouped onto it carries label s.
    """
    labels = np.asarray(labels)
    if labels.shape != (group_map.shape[0],):
        raise ShapeError(f"expected {group_map.shape[0]} labels, got {labels.shape}")
    num_speakers = num_speakers or (int(labels.max()) + 1 if labels.size else 0)
    num_scales = len(per_scale_embeddings)
    dim = np.shape(per_scale_embeddings[0])[1]
    vectors = np.empty((num_speakers, num_scales, dim))
    counts = np.zeros((num_speakers, num_scales), dtype=np.int64)
    for s in range(num_speakers):
        steps = labels == s
        if not steps.any():
            raise ProfileError(f"speaker {s} has no assigned segments")
        for k, embeddings in enumerate(per_scale_embeddings):
            members = np.unique(group_map[steps, k])
            vectors[s, k] = np.asarray(embeddings, dtype=np.float64)[members].mean(axis=0)
            counts[s, k] = members.size
    if np.any(np.linalg.norm(vectors, axis=-1) == 0):
        raise ProfileError("cluster-average embedding has zero norm")
    return ClusterProfile(vectors, counts)


def _pair_vectors(profile):
    vectors = profile.vectors if isinstance(profile, ClusterProfile) else np.asarray(profile, dtype=np.float64)
    if vectors.ndim != 3 or vectors.shape[0] != 2:
        raise ShapeError(f"pairwise decoding needs a (2, K, dim) profile, got {vectors.shape}")
    return vectors


def stack_input(u_i, profile):
    """(3K x dim): the K input embeddings, then speaker 1's K profiles, then speaker 2's"""
    u_i = np.asarray(u_i, dtype=np.float64)
    vectors = _pair_vectors(profile)
    if vectors.shape[1:] != u_i.shape:
        raise ShapeError(f"profile shape {vectors.shape[1:]} does not match input {u_i.shape}")
    return np.concatenate([u_i, vectors[0], vectors[1]], axis=0)


def _stack_batch(u, profiles):
    batch, steps, num_scales, dim = u.shape
    v = np.broadcast_to(profiles.reshape(batch, 1, 2 * num_scales, dim), (batch, steps, 2 * num_scales, dim))
    return np.concatenate([u, v], axis=2)


def _unit(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ProfileError("cannot take cosine similarity of a zero-norm embedding")
    return x / norms


def _cosines(u, profiles):
    """(batch, steps, 2, K) cosine between u_{i,k} and each speaker's scale-k profile"""
    return np.einsum('btke,bske->btsk', _unit(u), _unit(profiles), optimize=True)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class MsddModel:
    """Forward and backward passes of the decoder over batches of equal-length sequences"""

    def __init__(self, params):
        self.params = params
        self.shape = params.shape

    def scale_weights(self, stacked):
        """Softmax scale weights for stacked inputs of shape (..., 3K, dim)"""
        weights, _ = self._weights_forward(np.asarray(stacked, dtype=np.float64))
        return weights

    def _weights_forward(self, stacked):
        p = self.params
        lead = stacked.shape[:-2]
        if stacked.shape[-2] != 3 * self.shape.num_scales:
            raise ShapeError(f"stacked input needs {3 * self.shape.num_scales} rows, got {stacked.shape[-2]}")
        x = stacked.reshape(-1, *stacked.shape[-2:])
        z1 = nk.conv1d_forward(x, p['conv1_weight'], p['conv1_bias'])
        a1 = nk.relu(z1)
        z2 = nk.conv1d_forward(a1, p['conv2_weight'], p['conv2_bias'])
        a2 = nk.relu(z2)
        pooled = a2.mean(axis=-1)
        h1 = nk.linear_forward(pooled, p['fc1_weight'], p['fc1_bias'])
        a3 = nk.relu(h1)
        logits = nk.linear_forward(a3, p['fc2_weight'], p['fc2_bias'])
        weights = nk.softmax(logits)
        cache = {'x': x, 'z1': z1, 'a1': a1, 'z2': z2, 'a2': a2, 'pooled': pooled,
                 'h1': h1, 'a3': a3, 'weights': weights}
        return weights.reshape(*lead, self.shape.num_scales), cache

    def decode(self, context):
        probs, _ = self._decode_forward(np.asarray(context, dtype=np.float64))
        return probs

    def _decode_forward(self, context):
        p = self.params
        hidden, lstm_cache = nk.bilstm_forward(context, p.tensors, self.shape.lstm_layers)
        logits = nk.linear_forward(hidden, p['out_weight'], p['out_bias'])
        return expit(logits), (hidden, lstm_cache, logits)

    def forward(self, u, profiles):
        """
        u is (batch, steps, K, dim) and profiles (batch, 2, K, dim). Returns
        sigmoid outputs (batch, steps, 2) and the cache for backward.
        """
        u = np.asarray(u, dtype=np.float64)
        profiles = np.asarray(profiles, dtype=np.float64)
        batch, steps, num_scales, dim = u.shape
        if num_scales != self.shape.num_scales or profiles.shape != (batch, 2, num_scales, dim):
            raise ShapeError(f"inputs {u.shape} / profiles {profiles.shape} do not fit K={self.shape.num_scales}")
        weights, weight_cache = self._weights_forward(_stack_batch(u, profiles))
        cosines = _cosines(u, profiles)
        context = (weights[:, :, None, :] * cosines).reshape(batch, steps, 2 * num_scales)
        probs, (hidden, lstm_cache, logits) = self._decode_forward(context)
        cache = {
            'weights': weights, 'weight_cache': weight_cache, 'cosines': cosines,
            'context': context, 'hidden': hidden, 'lstm_cache': lstm_cache, 'logits': logits,
        }
        return probs, cache

    def backward(self, cache, grad_logits):
        p = self.params
        grads = {}
        grad_hidden, grads['out_weight'], grads['out_bias'] = nk.linear_backward(
            grad_logits, cache['hidden'], p['out_weight']
        )
        grad_context, lstm_grads = nk.bilstm_backward(grad_hidden, cache['lstm_cache'])
        grads.update(lstm_grads)

        cosines = cache['cosines']
        batch, steps, _, num_scales = cosines.shape
        grad_weights = (grad_context.reshape(batch, steps, 2, num_scales) * cosines).sum(axis=2)

        wc = cache['weight_cache']
        grad_logits_w = nk.softmax_backward(grad_weights.reshape(-1, num_scales), wc['weights'])
        grad_a3, grads['fc2_weight'], grads['fc2_bias'] = nk.linear_backward(
            grad_logits_w, wc['a3'], p['fc2_weight']
        )
        grad_h1 = nk.relu_backward(grad_a3, wc['h1'])
        grad_pooled, grads['fc1_weight'], grads['fc1_bias'] = nk.linear_backward(
            grad_h1, wc['pooled'], p['fc1_weight']
        )
        bins = wc['a2'].shape[-1]
        grad_a2 = np.broadcast_to(grad_pooled[..., None] / bins, wc['a2'].shape)
        grad_z2 = nk.relu_backward(grad_a2, wc['z2'])
        grad_a1, grads['conv2_weight'], grads['conv2_bias'] = nk.conv1d_backward(
            grad_z2, wc['a1'], p['conv2_weight']
        )
        grad_z1 = nk.relu_backward(grad_a1, wc['z1'])
        _, grads['conv1_weight'], grads['conv1_bias'] = nk.conv1d_backward(
            grad_z1, wc['x'], p['conv1_weight'], input_grad=False
        )
        return grads

    def loss_and_grads(self, u, profiles, targets):
        probs, cache = self.forward(u, profiles)
        loss = nk.bce_loss(probs, targets)
        grads = self.backward(cache, nk.bce_logit_grad(cache['logits'], targets))
        return loss, grads

    def predict(self, u, profile_pair):
        """Full-length decoding of one session: (steps, 2) posteriors and (steps, K) scale weights"""
        probs, cache = self.forward(np.asarray(u)[None], _pair_vectors(profile_pair)[None])
        return probs[0], cache['weights'][0]


def scale_weights(stacked, params):
    return MsddModel(params).scale_weights(stacked)


def context_vectors(u_i, profile, weights):
    u_i = np.asarray(u_i, dtype=np.float64)
    vectors = _pair_vectors(profile)
    cosines = _cosines(u_i[None, None], vectors[None])[0, 0]
    per_speaker = np.asarray(weights, dtype=np.float64)[None, :] * cosines
    return ContextVector(per_speaker, per_speaker.reshape(-1))


def decode_pair(sequence, params):
    """Sigmoid outputs (..., steps, 2) for a context sequence (..., steps, 2K)"""
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.shape[-2] < 1:
        raise ShapeError("cannot decode an empty sequence")
    if sequence.shape[-1] != 2 * params.shape.num_scales:
        raise ShapeError(f"context vectors need {2 * params.shape.num_scales} entries, got {sequence.shape[-1]}")
    return MsddModel(params).decode(sequence)


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------

def speaker_overlap(segments, timeline, speakers):
    """(segments x speakers) seconds of each speaker's speech inside each segment"""
    onsets = np.array([segment.onset for segment in segments])
    offsets = np.array([segment.offset for segment in segments])
    overlap = np.zeros((len(segments), len(speakers)))
    for s, speaker in enumerate(speakers):
        intervals = timeline.intervals_for(speaker)
        if not intervals or not len(segments):
            continue
        starts = np.array([interval.onset for interval in intervals])
        ends = np.array([interval.offset for interval in intervals])
        pieces = np.minimum(offsets[:, None], ends[None, :]) - np.maximum(onsets[:, None], starts[None, :])
        overlap[:, s] = np.clip(pieces, 0.0, None).sum(axis=1)
    return overlap


def make_labels(timeline, base_segments, speaker_pair):
    """1 where the speaker covers strictly more than half of the base segment"""
    overlap = speaker_overlap(base_segments, timeline, speaker_pair)
    lengths = np.array([segment.duration for segment in base_segments])
    return (overlap > 0.5 * lengths[:, None]).astype(np.int8)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingHyper:
    learning_rate: float = 1e-3
    max_epochs: int = 30
    patience: int = 3
    batch_size: int = 32
    chunk_steps: int = 50
    profile_mode: str = 'oracle'
    seed: int = 0
    # clustering profile mode only
    r: float = 1.0
    max_p: int = 50
    kmeans_init: int = 10

    def __post_init__(self):
        if self.profile_mode not in ('oracle', 'clustering'):
            raise TrainingDataError(f"unknown profile mode {self.profile_mode!r}")


@dataclass(frozen=True)
class TrainingSession:
    embeddings: object
    timeline: object

    @property
    def session_id(self):
        return self.embeddings.session_id


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_f1: float
    best_f1: float
    improved: bool


@dataclass
class TrainingReport:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_f1: float = -1.0
    stopped_early: bool = False

    def as_dicts(self):
        return [asdict(record) for record in self.records]


@dataclass(frozen=True)
class _Example:
    session_id: str
    u: np.ndarray
    profile: np.ndarray
    targets: np.ndarray


def _oracle_labels(overlap):
    return np.argmax(overlap, axis=1)


def _clustering_labels(session, oracle, hyper):
    """Clustering with two fixed clusters, renamed to the reference speaker each one covers most"""
    result = cluster_session(
        session.embeddings, r=hyper.r, max_p=hyper.max_p, num_speakers=2,
        seed=hyper.seed, kmeans_init=hyper.kmeans_init,
    )
    counts = np.zeros((2, 2))
    np.add.at(counts, (oracle, result.labels), 1)
    mapping = optimal_mapping(counts)
    to_reference = {hyp: ref for ref, hyp in mapping.items()}
    if len(to_reference) != result.num_speakers:
        raise ProfileError(f"{session.session_id}: clusters do not align with the reference speakers")
    return np.array([to_reference[label] for label in result.labels])


def prepare_example(session, hyper):
    speakers = session.timeline.speakers
    if len(speakers) != 2:
        raise TrainingDataError(
            f"session {session.session_id} has {len(speakers)} speakers; training needs exactly 2"
        )
    segments = session.embeddings.segments
    overlap = speaker_overlap(segments.base_segments, session.timeline, speakers)
    targets = (overlap > 0.5 * np.array([s.duration for s in segments.base_segments])[:, None]).astype(np.int8)
    labels = _oracle_labels(overlap)
    if hyper.profile_mode == 'clustering':
        labels = _clustering_labels(session, labels, hyper)
    try:
        profile = cluster_average(session.embeddings.embeddings, labels, segments.group_map, 2)
    except ProfileError as exc:
        raise TrainingDataError(f"session {session.session_id}: {exc}") from exc
    u = session.embeddings.base_aligned().astype(np.float32)
    return _Example(session.session_id, u, profile.vectors, targets)


def _chunks(example, chunk_steps):
    """Chunks in both speaker orders"""
    swapped = example.profile[::-1].copy()
    for start in range(0, len(example.u), chunk_steps):
        stop = start + chunk_steps
        yield example.u[start:stop], example.profile, example.targets[start:stop]
        yield example.u[start:stop], swapped, example.targets[start:stop, ::-1]


def _batches(chunks, batch_size, rng):
    buckets = defaultdict(list)
    for index, chunk in enumerate(chunks):
        buckets[len(chunk[0])].append(index)
    batches = []
    for length in sorted(buckets):
        members = rng.permutation(buckets[length])
        batches += [members[i:i + batch_size] for i in range(0, len(members), batch_size)]
    for b in rng.permutation(len(batches)):
        selected = [chunks[i] for i in batches[b]]
        yield (
            np.stack([c[0] for c in selected]).astype(np.float64),
            np.stack([c[1] for c in selected]),
            np.stack([c[2] for c in selected]).astype(np.float64),
        )


def f1_score(examples, model, threshold=VALIDATION_THRESHOLD):
    tp = fp = fn = 0
    for example in examples:
        probs, _ = model.predict(example.u.astype(np.float64), example.profile)
        predicted = probs > threshold
        actual = example.targets.astype(bool)
        tp += int(np.sum(predicted & actual))
        fp += int(np.sum(predicted & ~actual))
        fn += int(np.sum(~predicted & actual))
    denominator = 2 * tp + fp + fn
    return 1.0 if denominator == 0 else 2 * tp / denominator


def train(train_sessions, val_sessions, shape, hyper=TrainingHyper()):
    """
    Train a decoder on two-speaker sessions. Returns the parameters of the
    epoch with the best validation F1 and the per-epoch report.
    """
    train_examples = [prepare_example(session, hyper) for session in train_sessions]
    val_examples = [prepare_example(session, hyper) for session in val_sessions]
    if not train_examples:
        raise TrainingDataError("no training sessions")
    for example in train_examples + val_examples:
        if example.u.shape[1:] != (shape.num_scales, shape.emb_dim):
            raise ShapeError(
                f"session {example.session_id} has (K, dim) = {example.u.shape[1:]}, "
                f"model expects {(shape.num_scales, shape.emb_dim)}"
            )

    rng = np.random.default_rng(hyper.seed)
    params = nk.MsddParameters.initialize(shape, seed=hyper.seed)
    model = MsddModel(params)
    adam = nk.AdamHyper(learning_rate=hyper.learning_rate)
    state = nk.AdamState()
    chunks = [chunk for example in train_examples for chunk in _chunks(example, hyper.chunk_steps)]
    logger.info(
        "training on %d sessions (%d chunks), validating on %d; %d parameters",
        len(train_examples), len(chunks), len(val_examples), params.num_parameters(),
    )

    report = TrainingReport()
    best_params = params.copy()
    waited = 0
    for epoch in range(1, hyper.max_epochs + 1):
        total_loss = 0.0
        total_items = 0
        for u, profiles, targets in _batches(chunks, hyper.batch_size, rng):
            loss, grads = model.loss_and_grads(u, profiles, targets)
            nk.adam_step(params.tensors, grads, state, adam)
            total_loss += loss * len(u)
            total_items += len(u)
        val_f1 = f1_score(val_examples, model) if val_examples else 0.0
        improved = val_f1 > report.best_f1
        if improved:
            report.best_f1, report.best_epoch = val_f1, epoch
            best_params = params.copy()
            waited = 0
        else:
            waited += 1
        record = EpochRecord(epoch, total_loss / max(total_items, 1), val_f1, report.best_f1, improved)
        report.records.append(record)
        logger.info(
            "epoch %d: loss %.4f, val F1 %.4f (best %.4f at epoch %d)",
            epoch, record.loss, val_f1, report.best_f1, report.best_epoch,
        )
        if waited >= hyper.patience:
            report.stopped_early = epoch < hyper.max_epochs
            break
    return best_params, report


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def infer(session, clustering, params, threshold=DEFAULT_THRESHOLD, max_speakers=8):
    """
    Overlap-aware decoding of one session. Every speaker pair is decoded and
    each speaker's posterior is the mean over the pairs it belongs to. Steps
    where no speaker passes the threshold keep their clustering label.
    """
    num_speakers = clustering.num_speakers
    if num_speakers > max_speakers:
        raise ClusteringError(f"{num_speakers} speakers exceed the maximum of {max_speakers}")
    labels = np.asarray(clustering.labels)
    segments = session.segments
    if labels.shape != (segments.num_steps,):
        raise ShapeError(f"{len(labels)} clustering labels for {segments.num_steps} base steps")

    if num_speakers == 1:
        grid = PosteriorGrid(None, threshold)
    else:
        params.check_compatible(segments.scale_config.num_scales, session.dim)
        model = MsddModel(params)
        profile = cluster_average(session.embeddings, labels, segments.group_map, num_speakers)
        u = session.base_aligned()
        sums = np.zeros((num_speakers, len(labels)))
        pair_outputs = {}
        weights = []
        for first, second in combinations(range(num_speakers), 2):
            probs, step_weights = model.predict(u, profile.pair(first, second))
            pair_outputs[(first, second)] = probs
            sums[first] += probs[:, 0]
            sums[second] += probs[:, 1]
            weights.append(step_weights)
        probabilities = sums / (num_speakers - 1)
        silent = ~(probabilities > threshold).any(axis=0)
        grid = PosteriorGrid(probabilities, threshold, pair_outputs, np.stack(weights))
        logger.debug(
            "%s: %d pairs decoded, %d steps fell back to clustering labels",
            session.session_id, len(pair_outputs), int(silent.sum()),
        )

    return grid, decoded_timeline(session, grid, labels, threshold)


def posterior_activity(probabilities, labels, threshold):
    """
    Active speakers per step: every speaker whose posterior is above the
    threshold, or the clustering label where none is. `probabilities` None
    stands for a single-speaker session.
    """
    labels = np.asarray(labels)
    if probabilities is None:
        return np.ones((1, len(labels)), dtype=bool)
    active = np.asarray(probabilities) > threshold
    silent = ~active.any(axis=0)
    active[labels[silent], np.flatnonzero(silent)] = True
    return active


def decoded_timeline(session, grid, labels, threshold):
    active = posterior_activity(grid.probabilities, labels, threshold)
    names = [hypothesis_speaker(s) for s in range(len(active))]
    return step_activity_to_timeline(active, session.segments.base_spans, names, session.session_id)
