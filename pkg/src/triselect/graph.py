"""Stage III (part 2): thresholded similarity graphs and budgeted greedy MIS."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_pids, check_square_symmetric
from .visual import similarity_matrix

logger = logging.getLogger(__name__)

MIN_KEYPOINTS = 5


@dataclass
class SimilarityGraph:
    """Nodes are pids in ascending order; ``weights[i, j]`` is S_ij if S_ij >= tau."""

    nodes: np.ndarray
    weights: np.ndarray
    tau: float

    @property
    def adjacency(self) -> np.ndarray:
        return self.weights > 0

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def n_edges(self) -> int:
        return int(np.triu(self.adjacency, 1).sum())

    def edges(self) -> list:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return [(int(self.nodes[a]), int(self.nodes[b])) for a, b in zip(i, j)]


def build_graph(pids, similarity, tau: float) -> SimilarityGraph:
    """Keep similarities ``>= tau`` as weighted edges, drop self-loops."""
    if not (isinstance(tau, (int, float)) and math.isfinite(tau) and tau >= 0):
        raise ValueError(f"tau must be a finite non-negative number, got {tau!r}")
    S = check_square_symmetric(similarity)
    pids = check_pids(pids, S.shape[0])
    order = np.argsort(pids, kind="stable")
    S = S[np.ix_(order, order)]
    W = np.where(S >= tau, S, 0.0)
    np.fill_diagonal(W, 0.0)
    W = np.maximum(W, W.T)
    return SimilarityGraph(pids[order], W, float(tau))


def greedy_mis(g: SimilarityGraph, budget: Optional[int] = None) -> list:
    """Min-degree greedy independent set, stopping after `budget` picks.

    Ties on degree go to the smallest pid. Returns pids in selection order.
    """
    adj = g.adjacency.copy()
    alive = np.ones(len(g.nodes), dtype=bool)
    deg = adj.sum(axis=1).astype(np.int64)
    out = []
    limit = len(g.nodes) if budget is None else int(budget)
    while alive.any() and len(out) < limit:
        masked = np.where(alive, deg, np.iinfo(np.int64).max)
        v = int(np.argmin(masked))
        out.append(int(g.nodes[v]))
        removed = adj[v] & alive
        removed[v] = True
        alive &= ~removed
        # neighbours of removed nodes lose those edges
        deg -= adj[:, removed].sum(axis=1)
    return out


def is_independent(g: SimilarityGraph, selected) -> bool:
    idx = np.searchsorted(g.nodes, selected)
    sub = g.adjacency[np.ix_(idx, idx)]
    return not sub.any()


def is_maximal(g: SimilarityGraph, selected) -> bool:
    """True when no unselected node can be added without creating an edge."""
    chosen = np.zeros(len(g.nodes), dtype=bool)
    chosen[np.searchsorted(g.nodes, selected)] = True
    blocked = chosen | g.adjacency[chosen].any(axis=0)
    return bool(blocked.all())


def allocate_budget(cluster_sizes, B_total: int) -> list:
    """Largest-remainder split of `B_total` proportional to cluster size.

    Leftover units go to the largest fractional remainders, ties toward the
    lower cluster index. When the budget covers every non-empty cluster, each
    of them gets at least one unit. Allocations sum to
    ``min(B_total, sum(sizes))``.
    """
    sizes = [int(s) for s in cluster_sizes]
    if any(s < 0 for s in sizes):
        raise ValueError("cluster sizes must be non-negative")
    total = min(max(int(B_total), 0), sum(sizes))
    if total == 0:
        return [0] * len(sizes)
    denom = sum(sizes)
    alloc, rema = [], []
    for s in sizes:
        q, r = divmod(total * s, denom)
        alloc.append(q)
        rema.append(r)
    leftover = total - sum(alloc)
    for i in sorted(range(len(sizes)), key=lambda i: (-rema[i], i))[:leftover]:
        alloc[i] += 1
    nonempty = [i for i, s in enumerate(sizes) if s > 0]
    if total >= len(nonempty):
        for i in nonempty:
            if alloc[i] == 0:
                donor = max(range(len(sizes)), key=lambda j: (alloc[j], j))
                alloc[donor] -= 1
                alloc[i] = 1
    return alloc


@dataclass
class ClusterSelection:
    cluster: int
    nodes: list
    budget: int
    selected: list
    n_edges: int
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"cluster": self.cluster, "n_nodes": len(self.nodes), "budget": self.budget,
                "n_edges": self.n_edges, "selected": list(self.selected),
                "excluded": list(self.excluded)}


@dataclass
class SelectionResult:
    selected: list
    per_cluster: dict
    tau: float
    budget_total: int
    clusters: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    @property
    def budget_used(self) -> int:
        return len(self.selected)

    @property
    def x_v(self) -> dict:
        chosen = set(self.selected)
        nodes = sorted(p for c in self.clusters for p in c.nodes)
        return {p: int(p in chosen) for p in nodes}

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "budget_total": self.budget_total,
            "budget_used": self.budget_used,
            "selected": list(self.selected),
            "per_cluster": {str(c): list(p) for c, p in sorted(self.per_cluster.items())},
            "clusters": [c.to_dict() for c in self.clusters],
            "excluded": [{"pid": pid, "reason": reason} for pid, reason in self.excluded],
            "x_v": {str(p): v for p, v in self.x_v.items()},
        }


def select_from_graphs(graphs: dict, B_total: int, excluded=None) -> SelectionResult:
    """Budgeted greedy MIS over per-cluster graphs with one redistribution pass.

    `graphs` maps cluster id to SimilarityGraph (all sharing one tau).
    """
    keys = sorted(graphs)
    sizes = [len(graphs[c].nodes) for c in keys]
    alloc = dict(zip(keys, allocate_budget(sizes, B_total)))
    picks = {c: greedy_mis(graphs[c], alloc[c]) for c in keys}

    unused = sum(alloc.values()) - sum(len(p) for p in picks.values())
    headroom = {}
    for c in keys:
        if len(picks[c]) == alloc[c]:
            room = len(greedy_mis(graphs[c])) - alloc[c]
            if room > 0:
                headroom[c] = room
    if unused > 0 and headroom:
        cand = sorted(headroom)
        extra = allocate_budget([sizes[keys.index(c)] for c in cand], unused)
        for c, e in zip(cand, extra):
            e = min(e, headroom[c])
            if e:
                alloc[c] += e
                picks[c] = greedy_mis(graphs[c], alloc[c])

    per_cluster, selected, info = {}, [], []
    for c in keys:
        per_cluster[c] = picks[c]
        selected.extend(picks[c])
        info.append(ClusterSelection(c, [int(p) for p in graphs[c].nodes], alloc[c],
                                     picks[c], graphs[c].n_edges))
    tau = next(iter(graphs.values())).tau if graphs else float("nan")
    return SelectionResult(selected, per_cluster, tau, int(B_total), info, list(excluded or []))


def select_representatives(clusters: dict, tau=0.5, sigma_d=0.4, B_total=10, ratio=0.8,
                           n_jobs=1, min_keypoints=MIN_KEYPOINTS) -> SelectionResult:
    """Pick non-redundant images per cluster under a global budget.

    Parameters
    ----------
    clusters : dict
        Cluster id to list of DescriptorSets.
    tau : float
        Similarity threshold for an edge.
    sigma_d, ratio : float
        Passed to :func:`triselect.visual.pair_similarity`.
    B_total : int
        Global cap on the number of selected images.

    Images with fewer than `min_keypoints` descriptors are excluded and
    listed in the result; they never abort the run.
    """
    excluded = []
    usable = {}
    for c in sorted(clusters):
        keep = []
        for ds in clusters[c]:
            if len(ds) < min_keypoints:
                logger.warning("pid %s: %d keypoints, excluded from selection", ds.pid, len(ds))
                excluded.append((ds.pid, f"too few keypoints ({len(ds)})"))
            else:
                keep.append(ds)
        usable[c] = sorted(keep, key=lambda d: d.pid)

    def graph_for(c):
        sets = usable[c]
        S = similarity_matrix(sets, sigma_d=sigma_d, ratio=ratio)
        return build_graph([d.pid for d in sets], S, tau)

    keys = [c for c in sorted(usable) if usable[c]]
    if n_jobs and n_jobs > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            graphs = dict(zip(keys, pool.map(graph_for, keys)))
    else:
        graphs = {c: graph_for(c) for c in keys}
    result = select_from_graphs(graphs, B_total, excluded)
    result.tau = float(tau)
    return result


class IndependentSetSelector(BaseEstimator):
    """Select a budgeted independent set from a similarity matrix.

    Parameters
    ----------
    tau : float
        Edge threshold on similarity.
    budget : int or None
        Maximum number of selections; None means unbounded.

    Attributes
    ----------
    graph_ : SimilarityGraph
    selected_ : list of pids, in selection order
    """

    def __init__(self, tau=0.5, budget=None):
        self.tau = tau
        self.budget = budget

    def fit(self, S, y=None, pids=None):
        self.pids_ = check_pids(pids, np.asarray(S).shape[0])
        self.graph_ = build_graph(self.pids_, S, self.tau)
        self.selected_ = greedy_mis(self.graph_, self.budget)
        return self

    def get_support(self) -> np.ndarray:
        """Boolean mask over the input rows marking selected items."""
        check_is_fitted(self, "selected_")
        return np.isin(self.pids_, self.selected_)
