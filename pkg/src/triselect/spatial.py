"""Stage II: viewpoint features and spectral clustering.

Every image becomes a 4-vector ``[dx/sx, dy/sy, cos(theta), sin(theta)]``
where ``(dx, dy)`` is its east/north offset from the task target and theta
its shooting direction. Images are grouped by normalized spectral clustering
on an RBF affinity, and the number of groups is picked by mean silhouette.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_features, check_pids, check_sigma, check_square_symmetric
from .errors import (
    DegenerateAngle,
    DegeneratePair,
    EmptyClusterUnrecoverable,
    InvalidK,
    TooFewRecords,
)
from .metadata import TaskSpec, geo_bearing, local_offsets

SIGMA_FLOOR = 1e-6
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-8
KMEANS_MAX_RESEEDS = 10


class ViewFeature(NamedTuple):
    dx: float
    dy: float
    cos_t: float
    sin_t: float


@dataclass(frozen=True)
class NormStats:
    sigma_x: float
    sigma_y: float


@dataclass
class AffinityMatrix:
    s: np.ndarray

    @property
    def n(self) -> int:
        return self.s.shape[0]


@dataclass
class ClusterAssignment:
    k: int
    labels: np.ndarray

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)

    def to_dict(self, pids=None) -> dict:
        pids = check_pids(pids, len(self.labels))
        return {"k": int(self.k),
                "labels": {str(int(p)): int(l) for p, l in zip(pids, self.labels)}}


@dataclass
class SilhouetteReport:
    per_k: dict = field(default_factory=dict)
    best_k: int = 1
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def to_dict(self, pids=None) -> dict:
        out = {"per_k": {str(k): float(v) for k, v in sorted(self.per_k.items())},
               "best_k": int(self.best_k)}
        if self.a is not None:
            pids = check_pids(pids, len(self.a))
            out["per_point"] = [{"pid": int(p), "a": float(ai), "b": float(bi)}
                                for p, ai, bi in zip(pids, self.a, self.b)]
        return out


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def compute_norm_stats(records, task: TaskSpec) -> NormStats:
    """Population std of east/north offsets about the target, floored at 1e-6 m."""
    if len(records) < 2:
        raise TooFewRecords(f"need at least 2 records for normalization, got {len(records)}")
    off = local_offsets([r.locat for r in records], task.whr)
    sx, sy = off.std(axis=0)
    return NormStats(max(float(sx), SIGMA_FLOOR), max(float(sy), SIGMA_FLOOR))


def shooting_direction(record, task: TaskSpec) -> float:
    """Record heading if given, otherwise the bearing from the camera to the target."""
    if record.heading is not None:
        return record.heading
    try:
        return geo_bearing(record.locat, task.whr)
    except DegeneratePair:
        raise DegenerateAngle(record.pid) from None


def build_features(records, task: TaskSpec, stats: NormStats) -> np.ndarray:
    """Return an (n, 4) array of view features, one row per record."""
    if not records:
        return np.zeros((0, 4))
    off = local_offsets([r.locat for r in records], task.whr)
    theta = np.array([shooting_direction(r, task) for r in records])
    return np.column_stack([off[:, 0] / stats.sigma_x, off[:, 1] / stats.sigma_y,
                            np.cos(theta), np.sin(theta)])


# ---------------------------------------------------------------------------
# affinity and spectrum
# ---------------------------------------------------------------------------

def pairwise_sq_distances(X) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def rbf_affinity(features, sigma) -> AffinityMatrix:
    sigma = check_sigma(sigma)
    X = check_features(features)
    s = np.exp(-pairwise_sq_distances(X) / (2.0 * sigma * sigma))
    return AffinityMatrix(s)


def default_sigma(features) -> float:
    """Median pairwise Euclidean distance; 1.0 when that median is zero."""
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise TooFewRecords("default sigma needs at least 2 features")
    med = float(np.median(pdist(X)))
    return med if med > 0 else 1.0


def normalized_laplacian(s) -> np.ndarray:
    """``I - D^-1/2 S D^-1/2``; isolated rows get a zero scaling."""
    s = np.asarray(s, dtype=float)
    deg = s.sum(axis=1)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    lap = np.eye(len(s)) - inv_sqrt[:, None] * s * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def spectral_embedding(s, k: int):
    """Row-normalized eigenvectors of the k smallest Laplacian eigenvalues.

    Returns ``(embedding, eigenvalues)`` with all eigenvalues ascending.
    """
    evals, evecs = np.linalg.eigh(normalized_laplacian(s))
    emb = evecs[:, :k].copy()
    norms = np.linalg.norm(emb, axis=1)
    nz = norms > 0
    emb[nz] /= norms[nz, None]
    return emb, evals


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def kmeans_plusplus(X, k, rng) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[i] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[i]) ** 2, axis=1))
    return centers


def _assign(X, centers):
    d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    # argmin returns the first minimum, i.e. the lowest cluster index on ties
    return np.argmin(d2, axis=1)


def kmeans(X, k, rng, max_iter=KMEANS_MAX_ITER, tol=KMEANS_TOL) -> np.ndarray:
    """Lloyd iterations from k-means++ seeds; returns raw labels.

    A run that empties a cluster is restarted from fresh seeds, at most
    ``KMEANS_MAX_RESEEDS`` times.
    """
    X = np.asarray(X, dtype=float)
    for _ in range(KMEANS_MAX_RESEEDS + 1):
        centers = kmeans_plusplus(X, k, rng)
        labels = _assign(X, centers)
        for _ in range(max_iter):
            counts = np.bincount(labels, minlength=k)
            if np.any(counts == 0):
                break
            new = np.zeros_like(centers)
            np.add.at(new, labels, X)
            new /= counts[:, None]
            shift = float(np.sum((new - centers) ** 2))
            centers = new
            labels = _assign(X, centers)
            if shift <= tol:
                break
        if np.all(np.bincount(labels, minlength=k) > 0):
            return labels
    raise EmptyClusterUnrecoverable(
        f"k-means could not fill {k} clusters after {KMEANS_MAX_RESEEDS} reseeds")


def canonical_labels(labels, pids) -> np.ndarray:
    """Relabel clusters so indices ascend with their smallest member pid."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    firsts = [pids[labels == c].min() for c in uniq]
    order = uniq[np.argsort(firsts, kind="stable")]
    remap = {int(old): new for new, old in enumerate(order)}
    return np.array([remap[int(l)] for l in labels], dtype=np.int64)


def spectral_cluster(affinity, k: int, seed=0, pids=None) -> ClusterAssignment:
    """Ng-Jordan-Weiss spectral clustering into exactly `k` clusters."""
    s = affinity.s if isinstance(affinity, AffinityMatrix) else check_square_symmetric(affinity)
    n = s.shape[0]
    pids = check_pids(pids, n)
    if not 1 <= k <= n:
        raise InvalidK(f"k must lie in [1, {n}], got {k}")
    if k == 1:
        return ClusterAssignment(1, np.zeros(n, dtype=np.int64))
    if k == n:
        return ClusterAssignment(n, canonical_labels(np.arange(n), pids))
    emb, _ = spectral_embedding(s, k)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = kmeans(emb, k, rng)
    return ClusterAssignment(k, canonical_labels(labels, pids))


# ---------------------------------------------------------------------------
# silhouette
# ---------------------------------------------------------------------------

def silhouette_components(features, labels):
    """Per-point mean intra-cluster distance ``a`` and nearest-cluster distance ``b``."""
    X = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    D = squareform(pdist(X))
    clusters = np.unique(labels)
    n = len(labels)
    sums = np.stack([D[:, labels == c].sum(axis=1) for c in clusters], axis=1)
    counts = np.array([np.sum(labels == c) for c in clusters])
    own = np.searchsorted(clusters, labels)
    own_count = counts[own]
    a = np.zeros(n)
    multi = own_count > 1
    a[multi] = sums[multi, own[multi]] / (own_count[multi] - 1)
    means = sums / counts[None, :]
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    return a, b, own_count


def silhouette_samples(features, labels) -> np.ndarray:
    a, b, own_count = silhouette_components(features, labels)
    denom = np.maximum(a, b)
    s = np.zeros(len(a))
    ok = (own_count > 1) & (denom > 0)
    s[ok] = (b[ok] - a[ok]) / denom[ok]
    return s


def silhouette(features, assignment) -> float:
    """Mean silhouette over all points; singleton-cluster points count as 0."""
    labels = assignment.labels if isinstance(assignment, ClusterAssignment) else np.asarray(assignment)
    k = len(np.unique(labels))
    if k < 2:
        raise InvalidK(f"silhouette needs at least 2 clusters, got {k}")
    if len(labels) < 3:
        raise TooFewRecords("silhouette needs at least 3 points")
    return float(np.mean(silhouette_samples(features, labels)))


def default_k_range(n: int) -> list:
    return list(range(2, min(10, n - 1) + 1))


def select_k(features, k_range=None, seed=0, sigma=None, pids=None, n_jobs=1):
    """Cluster for every k in `k_range` and keep the best mean silhouette.

    Ties go to the smaller k. Each k draws from its own random stream seeded
    by ``(seed, k)``, so results do not depend on `n_jobs`.

    Returns ``(assignment, report)``.
    """
    X = check_features(features)
    n = X.shape[0]
    pids = check_pids(pids, n)
    ks = sorted(set(k_range)) if k_range is not None else default_k_range(n)
    if not ks:
        raise InvalidK(f"empty k range for n = {n}")
    if ks[0] < 2 or ks[-1] > n - 1:
        raise InvalidK(f"k range {ks} must lie within [2, {n - 1}]")
    if sigma is None:
        sigma = default_sigma(X)
    aff = rbf_affinity(X, sigma)

    def run(k):
        asg = spectral_cluster(aff, k, seed=np.random.default_rng([seed, k]), pids=pids)
        return asg, silhouette(X, asg)

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, ks))
    else:
        results = [run(k) for k in ks]

    best, best_score = None, -math.inf
    per_k = {}
    for k, (asg, score) in zip(ks, results):
        per_k[k] = score
        if score > best_score:
            best, best_score = asg, score
    a, b, _ = silhouette_components(X, best.labels)
    return best, SilhouetteReport(per_k=per_k, best_k=best.k, a=a, b=b)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

class ViewFeatureTransformer(BaseEstimator, TransformerMixin):
    """Map image records to normalized view features.

    ``fit`` learns the offset spread of the given records; ``transform``
    projects any records with that spread.
    """

    def __init__(self, task=None):
        self.task = task

    def fit(self, records, y=None):
        self.norm_stats_ = compute_norm_stats(list(records), self.task)
        return self

    def transform(self, records):
        check_is_fitted(self, "norm_stats_")
        return build_features(list(records), self.task, self.norm_stats_)


class ViewpointSpectralClustering(BaseEstimator, ClusterMixin):
    """Spectral clustering of view features with silhouette model selection.

    Parameters
    ----------
    n_clusters : int, optional
        Fixed cluster count. When None, k is chosen over `k_range`.
    k_range : sequence of int, optional
        Candidate counts; defaults to ``2 .. min(10, n - 1)``.
    sigma : float, optional
        RBF bandwidth; defaults to the median pairwise feature distance.
    random_state : int
    n_jobs : int
        Threads for the per-k search.

    Attributes
    ----------
    labels_, n_clusters_, sigma_, affinity_matrix_, silhouette_report_
    """

    def __init__(self, n_clusters=None, k_range=None, sigma=None, random_state=0, n_jobs=1):
        self.n_clusters = n_clusters
        self.k_range = k_range
        self.sigma = sigma
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y=None, pids=None):
        X = check_features(X, min_samples=1)
        self.sigma_ = self.sigma if self.sigma is not None else (
            default_sigma(X) if len(X) >= 2 else 1.0)
        self.affinity_matrix_ = rbf_affinity(X, self.sigma_).s
        if self.n_clusters is not None:
            asg = spectral_cluster(AffinityMatrix(self.affinity_matrix_), self.n_clusters,
                                   seed=np.random.default_rng([self.random_state, self.n_clusters]),
                                   pids=pids)
            self.silhouette_report_ = None
        else:
            asg, self.silhouette_report_ = select_k(
                X, self.k_range, seed=self.random_state, sigma=self.sigma_,
                pids=pids, n_jobs=self.n_jobs)
        self.assignment_ = asg
        self.labels_ = asg.labels
        self.n_clusters_ = asg.k
        return self
