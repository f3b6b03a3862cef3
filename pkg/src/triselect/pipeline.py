"""End-to-end orchestration: metadata filter, view clustering, visual selection.

`run_pipeline` reads a task file and a manifest, runs the enabled stages in
order and writes ``report.json`` plus one JSON file per stage into the
output directory. Selected images are copied to ``<out>/selected``.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .cache import DescriptorCache, cache_key
from .errors import (
    ConfigInvalid,
    DegeneratePair,
    EmptyStageInput,
    ImageDecodeError,
    ImageTooSmall,
    InputError,
    TaskFileInvalid,
    TriSelectError,
)
from .graph import MIN_KEYPOINTS, SelectionResult, select_representatives
from .metadata import TaskSpec, geo_bearing, parse_manifest, parse_task_spec
from .prefilter import FilterReport, preselect
from .spatial import (
    ClusterAssignment,
    SilhouetteReport,
    build_features,
    compute_norm_stats,
    default_sigma,
    select_k,
)
from .visual import DescriptorSet, ExtractorParams, GrayImage, extract_features

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "tri-select/run-report/1"
STAGE_CHOICES = ("1", "12", "123")


@dataclass
class PipelineConfig:
    task_path: Path
    manifest_path: Path
    image_root: Optional[Path] = None
    out_dir: Path = Path("out")
    budget: int = 10
    tau: float = 0.5
    sigma: Optional[float] = None
    sigma_d: float = 0.4
    ratio: float = 0.8
    k_min: Optional[int] = None
    k_max: Optional[int] = None
    seed: int = 0
    stages: str = "123"
    threads: int = 1
    plots: bool = False
    cache_dir: Optional[Path] = None
    extractor: ExtractorParams = field(default_factory=ExtractorParams)

    def validate(self):
        if self.stages not in STAGE_CHOICES:
            raise ConfigInvalid(f"stages must be one of {', '.join(STAGE_CHOICES)}, got {self.stages!r}")
        if not (isinstance(self.budget, int) and self.budget >= 1):
            raise ConfigInvalid(f"budget must be an integer >= 1, got {self.budget!r}")
        for name in ("tau", "ratio"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 < v <= 1.0):
                raise ConfigInvalid(f"{name} must lie in (0, 1], got {v!r}")
        if not (math.isfinite(self.sigma_d) and self.sigma_d > 0):
            raise ConfigInvalid(f"sigma_d must be > 0, got {self.sigma_d!r}")
        if self.sigma is not None and not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigInvalid(f"sigma must be > 0, got {self.sigma!r}")
        if self.k_min is not None and self.k_min < 2:
            raise ConfigInvalid(f"k_min must be >= 2, got {self.k_min}")
        if self.k_min is not None and self.k_max is not None and self.k_max < self.k_min:
            raise ConfigInvalid(f"k_max ({self.k_max}) is below k_min ({self.k_min})")
        if self.threads < 1:
            raise ConfigInvalid(f"threads must be >= 1, got {self.threads}")
        if "3" in self.stages and self.image_root is None:
            raise ConfigInvalid("Stage III needs an image directory")

    def echo(self) -> dict:
        """Settings that affect results; paths and thread count are left out."""
        return {"budget": self.budget, "tau": self.tau, "sigma": self.sigma,
                "sigma_d": self.sigma_d, "ratio": self.ratio, "k_min": self.k_min,
                "k_max": self.k_max, "seed": self.seed, "stages": self.stages}


@dataclass
class Stage2Result:
    assignment: ClusterAssignment
    silhouette: Optional[SilhouetteReport]
    pids: list
    features: np.ndarray
    sigma: Optional[float]
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "k": int(self.assignment.k),
            "sigma": self.sigma,
            "note": self.note,
            "assignment": self.assignment.to_dict(self.pids),
            "silhouette": self.silhouette.to_dict(self.pids) if self.silhouette else None,
            "features": {str(p): [float(v) for v in row] for p, row in zip(self.pids, self.features)},
        }


@dataclass
class RunReport:
    config: dict
    counts: dict
    stage1: FilterReport
    stage2: Optional[Stage2Result] = None
    stage3: Optional[SelectionResult] = None
    angular_coverage: Optional[dict] = None
    selected_files: list = field(default_factory=list)
    timings_ms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"schema": REPORT_SCHEMA, "config": self.config, "counts": self.counts,
               "stage1": self.stage1.to_dict()}
        if self.stage2 is not None:
            out["stage2"] = self.stage2.to_dict()
        if self.stage3 is not None:
            out["stage3"] = self.stage3.to_dict()
            out["selected_files"] = list(self.selected_files)
            out["angular_coverage"] = self.angular_coverage
        out["timings_ms"] = dict(self.timings_ms)
        return out


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

def load_task(path) -> TaskSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise TaskFileInvalid(f"cannot read task file {path}: {exc}") from exc
    try:
        return parse_task_spec(text)
    except InputError as exc:
        raise TaskFileInvalid(f"{path}: {exc}") from exc


def load_manifest(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(text)


def image_path(record, image_root) -> Path:
    rel = record.path if record.path else f"{record.pid}{record.format}"
    return Path(image_root) / rel


def load_image(path, pid=None) -> GrayImage:
    """Decode a PNG or JPEG file to luminance; raises ImageDecodeError."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB", "RGBA", "I;16"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageDecodeError(pid, str(path), str(exc)) from exc
    try:
        return GrayImage.from_array(arr)
    except ValueError as exc:
        raise ImageDecodeError(pid, str(path), str(exc)) from exc


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _k_range(cfg: PipelineConfig, n: int) -> list:
    hi = min(cfg.k_max if cfg.k_max is not None else 10, n - 1)
    lo = cfg.k_min if cfg.k_min is not None else 2
    if lo > hi:
        logger.warning("k range [%s, %s] does not fit %d records; using k = %d", lo, hi, n, hi)
        lo = hi
    return list(range(lo, hi + 1))


def run_stage2(records, task: TaskSpec, cfg: PipelineConfig) -> Stage2Result:
    if not records:
        raise EmptyStageInput("II", "Stage I kept nothing")
    pids = [r.pid for r in records]
    n = len(records)
    if n < 3:
        # silhouette needs at least three points; keep everything together
        feats = (build_features(records, task, compute_norm_stats(records, task))
                 if n == 2 else np.zeros((1, 4)))
        return Stage2Result(ClusterAssignment(1, np.zeros(n, dtype=int)), None, pids, feats,
                            None, note=f"{n} record(s): single cluster, no silhouette")
    feats = build_features(records, task, compute_norm_stats(records, task))
    sigma = cfg.sigma if cfg.sigma is not None else default_sigma(feats)
    asg, report = select_k(feats, k_range=_k_range(cfg, n), seed=cfg.seed, sigma=sigma,
                           pids=np.array(pids), n_jobs=cfg.threads)
    return Stage2Result(asg, report, pids, feats, float(sigma))


def _describe(record, cfg: PipelineConfig, cache):
    path = image_path(record, cfg.image_root)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageDecodeError(record.pid, str(path), str(exc)) from exc
    key = cache_key(data, cfg.extractor) if cache is not None else None
    if cache is not None:
        hit = cache.get(key, record.pid)
        if hit is not None:
            return hit
    img = load_image(path, record.pid)
    ds = extract_features(img, cfg.extractor, pid=record.pid)
    if cache is not None:
        ds = cache.put(key, ds)
    return ds


def run_stage3(records, stage2: Stage2Result, cfg: PipelineConfig):
    if not records:
        raise EmptyStageInput("III", "no clustered images")
    cache = DescriptorCache(cfg.cache_dir) if cfg.cache_dir is not None else None

    def one(r):
        try:
            return _describe(r, cfg, cache), None
        except (ImageDecodeError, ImageTooSmall) as exc:
            logger.warning("pid %s excluded: %s", r.pid, exc)
            return None, exc

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]

    failures = [(r.pid, exc) for r, (ds, exc) in zip(records, results) if ds is None]
    if len(failures) == len(records):
        pid, exc = failures[0]
        if isinstance(exc, ImageDecodeError):
            raise exc
        raise EmptyStageInput("III", "no image could be described")

    label_of = dict(zip(stage2.pids, stage2.assignment.labels))
    clusters = {}
    for r, (ds, _) in zip(records, results):
        if ds is not None:
            clusters.setdefault(int(label_of[r.pid]), []).append(ds)
    result = select_representatives(clusters, tau=cfg.tau, sigma_d=cfg.sigma_d,
                                     B_total=cfg.budget, ratio=cfg.ratio, n_jobs=cfg.threads,
                                     min_keypoints=MIN_KEYPOINTS)
    decode_excl = [(pid, f"unreadable image: {type(exc).__name__}") for pid, exc in failures]
    result.excluded = sorted(decode_excl + list(result.excluded))
    if not result.selected:
        raise EmptyStageInput("III", "every image was excluded")
    return result


def angular_coverage(selected_records, task: TaskSpec) -> Optional[dict]:
    """Fraction of ``ang_inter`` sectors around the target holding a selection."""
    if task.ang_inter is None:
        return None
    n_sectors = max(1, math.ceil(2 * math.pi / task.ang_inter - 1e-9))
    hit = set()
    for r in selected_records:
        try:
            angle = geo_bearing(task.whr, r.locat)
        except DegeneratePair:
            continue
        hit.add(min(int(angle // task.ang_inter), n_sectors - 1))
    return {"sectors": n_sectors, "covered": len(hit),
            "fraction": len(hit) / n_sectors, "sector_ids": sorted(hit)}


def _copy_selected(records, out_dir: Path, cfg: PipelineConfig) -> list:
    dest = out_dir / "selected"
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    names = []
    for r in records:
        src = image_path(r, cfg.image_root)
        name = f"{r.pid}_{src.name}"
        shutil.copyfile(src, dest / name)
        names.append(name)
    return names


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Run the enabled stages and write the reports; returns the RunReport."""
    cfg.validate()
    timings = {}
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    task = load_task(cfg.task_path)
    records = load_manifest(cfg.manifest_path)
    if records.warning_count:
        logger.warning("manifest: %d unknown keys ignored (%s)", records.warning_count,
                       ", ".join(sorted(records.unknown_keys)))
    timings["load"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    kept, stage1 = preselect(list(records), task)
    timings["stage1"] = (time.perf_counter() - t0) * 1e3
    counts = {"P": len(records), "P_v": len(kept)}
    report = RunReport(cfg.echo(), counts, stage1, timings_ms=timings)

    if "2" in cfg.stages:
        t0 = time.perf_counter()
        report.stage2 = run_stage2(kept, task, cfg)
        timings["stage2"] = (time.perf_counter() - t0) * 1e3
        counts["clustered"] = len(report.stage2.pids)
        counts["k"] = int(report.stage2.assignment.k)

    if "3" in cfg.stages:
        t0 = time.perf_counter()
        report.stage3 = run_stage3(kept, report.stage2, cfg)
        timings["stage3"] = (time.perf_counter() - t0) * 1e3
        by_pid = {r.pid: r for r in kept}
        chosen = [by_pid[p] for p in sorted(report.stage3.selected)]
        counts["P_r"] = len(chosen)
        report.angular_coverage = angular_coverage(chosen, task)
        report.selected_files = _copy_selected(chosen, out_dir, cfg)

    write_reports(report, out_dir)
    if cfg.plots and report.stage2 is not None:
        from .plots import emit_plots
        emit_plots(report.to_dict(), out_dir)
    return report


def write_reports(report: RunReport, out_dir) -> None:
    out = Path(out_dir)
    full = report.to_dict()
    (out / "report.json").write_text(dump_json(full), encoding="utf-8")
    (out / "stage1_report.json").write_text(dump_json(full["stage1"]), encoding="utf-8")
    for stage in ("stage2", "stage3"):
        path = out / f"{stage}_report.json"
        if stage in full:
            path.write_text(dump_json(full[stage]), encoding="utf-8")
        elif path.exists():
            path.unlink()


# ---------------------------------------------------------------------------
# estimator front-end
# ---------------------------------------------------------------------------

class TriSelect(BaseEstimator):
    """All three stages on in-memory records and images.

    Parameters
    ----------
    task : TaskSpec
    budget : int
        Global cap on the number of selected images.
    tau : float
        Similarity threshold for an edge in the per-cluster graphs.
    sigma : float or None
        RBF width for the view affinity; None uses the median pairwise distance.
    sigma_d, ratio : float
        Descriptor similarity width and ratio-test threshold.
    k_range : list of int or None
    random_state : int
    n_jobs : int

    Attributes
    ----------
    kept_ : list of ImageRecord
        Stage I survivors.
    filter_report_ : FilterReport
    labels_ : ndarray
        Cluster label per kept record.
    selection_ : SelectionResult
    selected_ : list of int
        Selected pids, ascending.
    """

    def __init__(self, task=None, budget=10, tau=0.5, sigma=None, sigma_d=0.4, ratio=0.8,
                 k_range=None, random_state=0, n_jobs=1):
        self.task = task
        self.budget = budget
        self.tau = tau
        self.sigma = sigma
        self.sigma_d = sigma_d
        self.ratio = ratio
        self.k_range = k_range
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, records, images=None):
        """`images` maps pid to a GrayImage, an array or a DescriptorSet."""
        if self.task is None:
            raise ConfigInvalid("TriSelect needs a task")
        images = images or {}
        self.kept_, self.filter_report_ = preselect(list(records), self.task)
        cfg = PipelineConfig(task_path=Path(), manifest_path=Path(), sigma=self.sigma,
                             seed=self.random_state, threads=self.n_jobs,
                             k_min=min(self.k_range) if self.k_range else None,
                             k_max=max(self.k_range) if self.k_range else None)
        stage2 = run_stage2(self.kept_, self.task, cfg)
        self.labels_ = stage2.assignment.labels
        self.silhouette_report_ = stage2.silhouette
        label_of = dict(zip(stage2.pids, stage2.assignment.labels))
        clusters = {}
        for r in self.kept_:
            if r.pid not in images:
                continue
            item = images[r.pid]
            ds = item if isinstance(item, DescriptorSet) else extract_features(item, pid=r.pid)
            clusters.setdefault(int(label_of[r.pid]), []).append(ds)
        if not clusters:
            raise EmptyStageInput("III", "no images supplied for kept records")
        self.selection_ = select_representatives(clusters, tau=self.tau, sigma_d=self.sigma_d,
                                                 B_total=self.budget, ratio=self.ratio,
                                                 n_jobs=self.n_jobs)
        self.selected_ = sorted(self.selection_.selected)
        return self


__all__ = ["PipelineConfig", "RunReport", "Stage2Result", "TriSelect", "run_pipeline",
           "load_image", "load_task", "load_manifest", "angular_coverage", "TriSelectError"]
