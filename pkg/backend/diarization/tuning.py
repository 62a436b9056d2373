"""
Development-set search of the two operating parameters: the coarsest-scale
clustering weight r and the MSDD decision threshold T. Each candidate is
scored with the same corpus DER the `score` command reports.
"""
import logging
from dataclasses import asdict, dataclass

from .clusterer import cluster_session
from .exceptions import ConfigError
from .msdd import decoded_timeline, infer
from .pipeline import clustering_timeline, run_parallel
from .scorer import aggregate, score_corpus

logger = logging.getLogger(__name__)

DEFAULT_R_GRID = (0.5, 0.75, 1.0, 1.5, 2.0, 3.0)
DEFAULT_THRESHOLD_GRID = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9)


@dataclass(frozen=True)
class TuningPoint:
    parameter: str
    value: float
    der: float

    def as_dict(self):
        return asdict(self)


@dataclass
class TuningResult:
    parameter: str
    points: list

    @property
    def best(self):
        """Lowest DER; ties go to the earliest grid value"""
        return min(self.points, key=lambda point: point.der)


def _check_grid(name, values, low, high=None):
    values = [float(v) for v in values]
    if not values:
        raise ConfigError(f"{name} grid is empty")
    for value in values:
        if value <= low or (high is not None and value >= high):
            bounds = f"strictly between {low} and {high}" if high is not None else f"greater than {low}"
            raise ConfigError(f"{name} grid value {value} must be {bounds}")
    return values


def _corpus_der(references, hypotheses, setup):
    return aggregate(score_corpus(references, hypotheses, setup)).der


def tune_r(dev_sessions, clustering_cfg, setup, r_values=DEFAULT_R_GRID, jobs=1):
    """
    Clustering-mode DER for every r. `dev_sessions` are TrainingSession
    pairs of embeddings and reference timelines.
    """
    r_values = _check_grid('r', r_values, 0.0)
    references = {s.session_id: s.timeline for s in dev_sessions}
    points = []
    for r in r_values:
        kwargs = {**clustering_cfg.as_kwargs(), 'r': r}

        def hypothesis(item):
            clustering = cluster_session(item.embeddings, **kwargs)
            return item.session_id, clustering_timeline(item.embeddings, clustering)

        hypotheses = dict(run_parallel(hypothesis, dev_sessions, jobs))
        points.append(TuningPoint('r', r, _corpus_der(references, hypotheses, setup)))
        logger.info("r=%.3f: DER %.4f", r, points[-1].der)
    return TuningResult('r', points)


def tune_threshold(dev_sessions, params, clustering_cfg, setup, thresholds=DEFAULT_THRESHOLD_GRID, jobs=1):
    """
    MSDD DER for every threshold. Each session is clustered and decoded once;
    only the final activity decision is repeated per threshold.
    """
    thresholds = _check_grid('threshold', thresholds, 0.0, 1.0)
    references = {s.session_id: s.timeline for s in dev_sessions}

    def decode(item):
        clustering = cluster_session(item.embeddings, **clustering_cfg.as_kwargs())
        grid, _ = infer(item.embeddings, clustering, params, max_speakers=clustering_cfg.max_speakers)
        return item.embeddings, grid, clustering.labels

    decoded = run_parallel(decode, dev_sessions, jobs)
    points = []
    for threshold in thresholds:
        hypotheses = {
            session.session_id: decoded_timeline(session, grid, labels, threshold)
            for session, grid, labels in decoded
        }
        points.append(TuningPoint('threshold', threshold, _corpus_der(references, hypotheses, setup)))
        logger.info("T=%.3f: DER %.4f", threshold, points[-1].der)
    return TuningResult('threshold', points)
