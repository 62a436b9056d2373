"""
Initialization clustering: multi-scale cosine affinity and auto-tuned
spectral clustering (normalized maximum eigengap).
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.sparse.csgraph import laplacian as csgraph_laplacian
from sklearn.cluster import KMeans

from .core import as_embedding_matrix
from .exceptions import AffinityError, ClusteringError, ScaleMismatchError

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-9
KMEANS_MAX_ITER = 300
# Clusters whose mean direction lies this close to the cone of the other
# cluster means carry no speaker of their own.
MERGE_RESIDUAL = 0.5


@dataclass(frozen=True)
class ClusteringResult:
    labels: np.ndarray
    num_speakers: int
    p_neighbors: int = 0
    scale_weights: tuple = ()
    per_scale_affinity: tuple = field(default=(), repr=False)
    affinity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ClusteringError(f"num_speakers must be >= 1, got {self.num_speakers}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_speakers):
            raise ClusteringError("labels must lie in [0, num_speakers)")


def init_scale_weights(r, num_scales):
    """
    Linearly spaced scale weights from `r` at the coarsest scale down (or up)
    to exactly 1.0 at the base scale.
    """
    if not r > 0:
        raise ClusteringError(f"r must be positive, got {r}")
    if num_scales < 1:
        raise ScaleMismatchError(f"num_scales must be >= 1, got {num_scales}")
    if num_scales == 1:
        return np.ones(1)
    k = np.arange(num_scales)
    weights = r - ((r - 1) / (num_scales - 1)) * k
    weights[0] = r
    weights[-1] = 1.0
    return weights


def cosine_affinity(emb):
    matrix = np.asarray(emb, dtype=np.float64)
    if matrix.ndim != 2:
        raise AffinityError(f"expected a 2-D embedding matrix, got shape {matrix.shape}")
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise AffinityError("cannot take cosine similarity of a zero-norm embedding")
    unit = matrix / norms
    affinity = np.clip(unit @ unit.T, -1.0, 1.0)
    affinity = (affinity + affinity.T) / 2
    np.fill_diagonal(affinity, 1.0)
    return affinity


def multiscale_affinity(per_scale, weights, group_map=None):
    """
    Weighted sum of the per-scale affinities over base-scale indices, min-max
    normalized to [0, 1].

    Without `group_map` every matrix must already be N x N over base steps.
    With it, per_scale[k] is over scale-k segments and is looked up through
    group_map[:, k].
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(per_scale) != len(weights):
        raise ScaleMismatchError(f"{len(per_scale)} affinity matrices but {len(weights)} weights")
    total = None
    for k, affinity in enumerate(per_scale):
        affinity = np.asarray(affinity, dtype=np.float64)
        if group_map is not None:
            index = group_map[:, k]
            if index.size and index.max() >= affinity.shape[0]:
                raise ScaleMismatchError(f"group map points past the {affinity.shape[0]} segments of scale {k}")
            affinity = affinity[np.ix_(index, index)]
        if total is None:
            total = np.zeros_like(affinity)
        if affinity.shape != total.shape or affinity.shape[0] != affinity.shape[1]:
            raise ScaleMismatchError(f"affinity of scale {k} has shape {affinity.shape}, expected {total.shape}")
        total += weights[k] * affinity

    low, high = total.min(), total.max()
    if high - low <= 0:
        # No contrast left: every pair is equally similar.
        return np.ones_like(total)
    return (total - low) / (high - low)


def eigensolve_symmetric(matrix):
    """Ascending eigenvalues and orthonormal eigenvectors (columns)"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise AffinityError(f"expected a square matrix, got shape {matrix.shape}")
    if not np.allclose(matrix, matrix.T, rtol=0, atol=SYMMETRY_TOLERANCE):
        raise AffinityError("matrix is not symmetric")
    return linalg.eigh(matrix)


def binarize_top_p(affinity, p):
    """Keep each row's p largest entries as 1, then symmetrize by averaging"""
    order = np.argsort(-affinity, axis=1, kind='stable')[:, :p]
    binary = np.zeros_like(affinity)
    np.put_along_axis(binary, order, 1.0, axis=1)
    return (binary + binary.T) / 2


def _eigengaps(eigenvalues, max_speakers):
    last = min(max_speakers, len(eigenvalues) - 1)
    return np.diff(eigenvalues[:last + 1])


def _canonical_labels(labels):
    """Relabel clusters in order of first appearance"""
    mapping = {}
    for label in labels:
        mapping.setdefault(int(label), len(mapping))
    return np.array([mapping[int(label)] for label in labels], dtype=np.int64)


def nme_sc(affinity, max_speakers=8, max_p=50, num_speakers=None, seed=0, kmeans_init=10):
    """
    Spectral clustering that picks the binarization sparsity p and the number
    of speakers from the normalized maximum eigengap.

    For each p the affinity is binarized to its row-wise top-p entries and
    the eigengaps of the symmetric normalized Laplacian are taken; the p with
    the smallest (p / N) / max_gap wins and the number of speakers is the
    position of that maximum gap. `num_speakers` fixes the count instead.
    """
    affinity = np.asarray(affinity, dtype=np.float64)
    if affinity.ndim != 2 or affinity.shape[0] != affinity.shape[1]:
        raise AffinityError(f"affinity must be square, got shape {affinity.shape}")
    n = affinity.shape[0]
    if n == 0:
        raise ClusteringError("cannot cluster an empty session")
    if num_speakers is not None and not 1 <= num_speakers <= max(n, 1):
        raise ClusteringError(f"cannot form {num_speakers} clusters from {n} segments")
    if n == 1 or num_speakers == 1 or np.ptp(affinity) == 0:
        return ClusteringResult(np.zeros(n, dtype=np.int64), 1, affinity=affinity)

    best = None
    for p in range(1, min(n - 1, max_p) + 1):
        graph = binarize_top_p(affinity, p)
        laplacian = csgraph_laplacian(graph, normed=True)
        eigenvalues, eigenvectors = eigensolve_symmetric((laplacian + laplacian.T) / 2)
        gaps = _eigengaps(eigenvalues, max_speakers)
        if num_speakers is None:
            count = int(np.argmax(gaps)) + 1
            gap = gaps[count - 1]
        else:
            count = num_speakers
            gap = eigenvalues[count] - eigenvalues[count - 1] if count < n else 1.0
        ratio = (p / n) / gap if gap > 0 else np.inf
        if best is None or ratio < best[0]:
            best = (ratio, p, count, eigenvectors)

    ratio, p, count, eigenvectors = best
    if not np.isfinite(ratio) and num_speakers is None:
        count = 1
    if count == 1:
        labels = np.zeros(n, dtype=np.int64)
    else:
        spectral = eigenvectors[:, :count]
        norms = np.linalg.norm(spectral, axis=1, keepdims=True)
        spectral = spectral / np.where(norms > 0, norms, 1.0)
        kmeans = KMeans(
            n_clusters=count, init='k-means++', n_init=kmeans_init,
            max_iter=KMEANS_MAX_ITER, random_state=seed,
        )
        labels = _canonical_labels(kmeans.fit_predict(spectral))
    found = int(labels.max()) + 1
    if found < count:
        logger.warning("k-means left %d of %d clusters empty", count - found, count)

    logger.debug("NME-SC chose p=%d, S=%d over %d segments", p, found, n)
    return ClusteringResult(labels, found, p_neighbors=p, affinity=affinity)


def _cluster_means(points, labels, num_clusters):
    means = np.zeros((num_clusters, points.shape[1]))
    np.add.at(means, labels, points)
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    return means / np.where(norms > 0, norms, 1.0)


def mixture_residuals(means):
    """
    Distance of every unit-norm cluster mean from the non-negative span of the
    other means. A transition cluster (steps mixing two speakers) or a second
    piece of one speaker sits near zero; a speaker of its own does not.
    """
    means = np.asarray(means, dtype=np.float64)
    residuals = np.full(len(means), np.inf)
    for c in range(len(means)):
        others = np.delete(means, c, axis=0)
        if len(others):
            _, residuals[c] = optimize.nnls(others.T, means[c])
    return residuals


def merge_mixture_clusters(points, labels, max_residual=MERGE_RESIDUAL, max_speakers=8):
    """
    Dissolve, one at a time, the cluster closest to being a mixture of the
    others while that distance is below `max_residual` (or more than
    `max_speakers` clusters remain). Its steps move to the most similar
    remaining cluster mean.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = _canonical_labels(labels)
    while len(labels) and labels.max() >= 1:
        count = int(labels.max()) + 1
        means = _cluster_means(points, labels, count)
        residuals = mixture_residuals(means)
        weakest = int(np.argmin(residuals))
        if residuals[weakest] >= max_residual and count <= max_speakers:
            break
        keep = np.delete(np.arange(count), weakest)
        members = labels == weakest
        labels[members] = keep[np.argmax(points[members] @ means[keep].T, axis=1)]
        logger.debug("merged cluster %d (residual %.3f) into the remaining %d", weakest, residuals[weakest], count - 1)
        labels = _canonical_labels(labels)
    return labels


def cluster_session(
    session, r=1.0, max_speakers=8, max_p=50, num_speakers=None, seed=0, kmeans_init=10,
    merge_residual=MERGE_RESIDUAL,
):
    """
    Initialization clustering of one SessionEmbeddings with linearly spaced
    scale weights.

    Without a fixed count, NME-SC searches up to twice `max_speakers` clusters
    and mixture clusters are merged away afterwards, so the count that comes
    back never exceeds `max_speakers`.
    """
    per_scale = tuple(cosine_affinity(as_embedding_matrix(emb, dtype=np.float64)) for emb in session.embeddings)
    weights = init_scale_weights(r, len(per_scale))
    affinity = multiscale_affinity(per_scale, weights, session.segments.group_map)
    if num_speakers is None:
        result = nme_sc(affinity, max_speakers=2 * max_speakers, max_p=max_p, seed=seed, kmeans_init=kmeans_init)
        points = np.einsum('k,nkd->nd', weights, session.base_aligned())
        labels = merge_mixture_clusters(points, result.labels, merge_residual, max_speakers)
    else:
        result = nme_sc(
            affinity, max_speakers=max_speakers, max_p=max_p,
            num_speakers=num_speakers, seed=seed, kmeans_init=kmeans_init,
        )
        labels = result.labels
    return ClusteringResult(
        labels=labels,
        num_speakers=int(labels.max()) + 1 if len(labels) else 1,
        p_neighbors=result.p_neighbors,
        scale_weights=tuple(float(w) for w in weights),
        per_scale_affinity=per_scale,
        affinity=affinity,
    )
