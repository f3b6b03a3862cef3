"""Turntable selection experiment: pick B views out of a full rotation.

Works on synthetic turntable renders, or on a local COIL-100 copy whose
files are named ``obj<ID>__<angle>.png``.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import build_graph, greedy_mis, select_from_graphs
from .render import render_view
from .visual import ExtractorParams, GrayImage, extract_features, similarity_matrix

COIL_NAME = re.compile(r"^obj(?P<obj>\d+)__(?P<angle>\d+)\.png$", re.IGNORECASE)


def circular_gaps(angles_deg) -> np.ndarray:
    """Gaps between consecutive angles around the full circle, in degrees."""
    a = np.sort(np.mod(np.asarray(angles_deg, dtype=float), 360.0))
    if len(a) == 0:
        return np.array([360.0])
    return np.diff(np.append(a, a[0] + 360.0))


def angular_difference(a_deg, b_deg):
    d = np.abs(np.mod(np.asarray(a_deg) - np.asarray(b_deg), 360.0))
    return np.minimum(d, 360.0 - d)


def calibrate_tau(S, angles_deg, budget: int, adjacent_deg: float = 10.0) -> float:
    """Threshold for a turntable similarity matrix.

    Starts from the largest tau that still joins every pair of views at most
    `adjacent_deg` apart, then lowers it through the observed similarity
    values while the greedy independent set keeps at least `budget` nodes.
    Returns the tau whose greedy set is smallest but still ``>= budget``
    (the larger tau on ties); if even the starting tau cannot reach
    `budget`, the starting tau is returned.
    """
    S = np.asarray(S, dtype=float)
    n = len(S)
    ang = np.asarray(angles_deg, dtype=float)
    diff = angular_difference(ang[:, None], ang[None, :])
    near = (diff <= adjacent_deg + 1e-9) & ~np.eye(n, dtype=bool)
    tau_adj = float(S[near].min()) if near.any() else 1.0
    pids = np.arange(n)
    iu = np.triu_indices(n, 1)
    values = np.unique(S[iu])
    values = values[values < tau_adj][::-1]

    best_tau = tau_adj
    best_size = len(greedy_mis(build_graph(pids, S, tau_adj)))
    if best_size < budget:
        return tau_adj
    for tau in values:
        size = len(greedy_mis(build_graph(pids, S, float(tau))))
        if size < budget:
            break
        if size < best_size:
            best_tau, best_size = float(tau), size
    return best_tau


@dataclass
class RotationResult:
    angles: np.ndarray
    selected: list
    selected_angles: list
    tau: float
    max_gap_deg: float
    min_selected_similarity_gap: float  # tau - max similarity among selected pairs
    similarity: np.ndarray
    stage3_seconds: float

    def to_dict(self) -> dict:
        return {"selected": list(self.selected), "selected_angles": list(self.selected_angles),
                "tau": self.tau, "max_gap_deg": self.max_gap_deg,
                "stage3_seconds": self.stage3_seconds}


def select_views(images, angles_deg, budget=10, sigma_d=0.4, ratio=0.8, adjacent_deg=10.0,
                 params=None, pids=None) -> RotationResult:
    """Run extraction, similarity, calibration and greedy selection on one object."""
    t0 = time.perf_counter()
    n = len(images)
    pids = list(range(n)) if pids is None else list(pids)
    sets = [extract_features(img, params, pid=p) for img, p in zip(images, pids)]
    S = similarity_matrix(sets, sigma_d=sigma_d, ratio=ratio)
    tau = calibrate_tau(S, angles_deg, budget, adjacent_deg)
    graph = build_graph(pids, S, tau)
    result = select_from_graphs({0: graph}, budget)
    elapsed = time.perf_counter() - t0

    index = {p: i for i, p in enumerate(pids)}
    sel_idx = [index[p] for p in result.selected]
    sel_angles = [float(angles_deg[i]) for i in sel_idx]
    if len(sel_idx) > 1:
        sub = S[np.ix_(sel_idx, sel_idx)]
        max_sim = float(sub[~np.eye(len(sel_idx), dtype=bool)].max())
    else:
        max_sim = 0.0
    return RotationResult(np.asarray(angles_deg, dtype=float), result.selected, sel_angles, tau,
                          float(circular_gaps(sel_angles).max()), tau - max_sim, S, elapsed)


def run_rotation_experiment(seed: int, n_views=72, budget=10, noise=0.01, size=256,
                            sigma_d=0.4, ratio=0.8, params=None) -> RotationResult:
    """Synthetic stand-in for a 72-view turntable object.

    Rendered at 256 px: at 128 px the similarity between views a fixed angle
    apart varies enough with local texture that about one object in six ends
    up with a gap just above 72 degrees.
    """
    angles = np.arange(n_views) * 360.0 / n_views
    images = [render_view(seed, rotation=math.radians(a), noise=noise, size=size) for a in angles]
    return select_views(images, angles, budget, sigma_d, ratio, params=params or ExtractorParams())


def load_coil_object(directory, obj_id: int):
    """Load the views of one COIL-100 object.

    Returns ``(pids, angles_deg, images)`` sorted by angle; each pid is
    ``obj_id * 1000 + angle``.
    """
    from PIL import Image

    views = []
    for path in Path(directory).iterdir():
        m = COIL_NAME.match(path.name)
        if m and int(m.group("obj")) == obj_id:
            angle = int(m.group("angle"))
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
            views.append((angle, GrayImage.from_array(arr)))
    views.sort(key=lambda v: v[0])
    pids = [obj_id * 1000 + a for a, _ in views]
    return pids, np.array([a for a, _ in views], dtype=float), [img for _, img in views]
