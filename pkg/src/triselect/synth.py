"""Seeded synthetic crowdsensing corpora with planted ground truth.

Randomness comes from numpy's PCG64 generator. A scenario seed feeds a
``numpy.random.SeedSequence`` which is split into independent child streams
(placement, violations, attributes, duplicates), so changing one aspect of a
config never perturbs the draws of another.

Clean images are placed in ``n_clusters`` angular sectors on a ring around
the task target, each camera facing the target. Violations of the metadata
filters are then planted on chosen records, and optional duplicate groups
copy one record's pose onto others.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigInvalid
from .metadata import (
    GeoPoint,
    ImageRecord,
    Resolution,
    TaskSpec,
    Timestamp,
    geo_bearing,
    local_offsets,
    offset_point,
    serialize_manifest,
    serialize_task_spec,
)
from .prefilter import FILTER_NAMES

RESOLUTIONS = ((1920, 1080), (4032, 2268), (5280, 2970), (960, 540), (3024, 3042))
LOW_RESOLUTIONS = ((640, 352), (480, 320), (320, 240))
TIME_START = Timestamp(2024, 3, 14, 10, 0)
TIME_END = Timestamp(2024, 3, 14, 18, 0)


@dataclass
class ScenarioConfig:
    seed: int = 0
    n_images: int = 60
    n_clusters: int = 3
    cluster_radius_m: float = 30.0     # ring radius around the target
    cluster_spread_m: float = 1.5      # positional std inside a cluster
    heading_jitter: float = 0.03       # radians
    target: GeoPoint = field(default_factory=lambda: GeoPoint(34.246, 108.904))
    violation_rates: dict = field(default_factory=dict)
    disjoint_violations: bool = True
    duplicate_group_sizes: list = field(default_factory=list)
    rotation_steps: int = 0
    tid: int = 1
    d_max: float = 60.0
    alt_range: tuple = (0.0, 20.0)
    ang_inter: Optional[float] = math.pi / 4
    scene_seed: Optional[int] = None
    image_size: int = 128

    def validate(self):
        if self.n_images < 1:
            raise ConfigInvalid(f"n_images must be >= 1, got {self.n_images}")
        if self.n_clusters < 1:
            raise ConfigInvalid(f"n_clusters must be >= 1, got {self.n_clusters}")
        if self.n_clusters > self.n_images:
            raise ConfigInvalid("more clusters than images")
        unknown = set(self.violation_rates) - set(FILTER_NAMES)
        if unknown:
            raise ConfigInvalid(f"unknown violation kinds {sorted(unknown)}")
        for k, r in self.violation_rates.items():
            if not 0.0 <= r <= 1.0:
                raise ConfigInvalid(f"violation rate for {k} must lie in [0, 1], got {r}")
        counts = self.violation_counts()
        if self.disjoint_violations and sum(counts.values()) > self.n_images:
            raise ConfigInvalid("disjoint violations exceed the number of images")
        if any(s < 2 for s in self.duplicate_group_sizes):
            raise ConfigInvalid("duplicate groups need at least 2 members")
        if self.cluster_radius_m <= 0 or self.cluster_spread_m < 0:
            raise ConfigInvalid("cluster radius must be > 0 and spread >= 0")
        if self.cluster_radius_m + 4 * self.cluster_spread_m > self.d_max:
            raise ConfigInvalid("clusters extend beyond d_max")
        if self.rotation_steps < 0:
            raise ConfigInvalid("rotation_steps must be >= 0")

    def violation_counts(self) -> dict:
        return {k: int(round(self.violation_rates.get(k, 0.0) * self.n_images))
                for k in FILTER_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "target" in d and not isinstance(d["target"], GeoPoint):
            t = d["target"]
            d["target"] = GeoPoint(t["lat"], t["lon"]) if isinstance(t, dict) else GeoPoint(*t)
        if "alt_range" in d:
            d["alt_range"] = tuple(d["alt_range"])
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigInvalid(f"unknown config keys {sorted(extra)}")
        return cls(**d)


@dataclass
class TruthEntry:
    cluster: int
    violations: tuple = ()
    duplicate_group: Optional[int] = None
    rotation: Optional[float] = None


@dataclass
class GroundTruth:
    entries: dict = field(default_factory=dict)   # pid -> TruthEntry
    n_clusters: int = 0
    scene_seed: int = 0

    def clean_pids(self) -> list:
        return [p for p, e in self.entries.items() if not e.violations]

    def labels(self, pids) -> np.ndarray:
        return np.array([self.entries[p].cluster for p in pids])

    def to_dict(self) -> dict:
        return {
            "n_clusters": self.n_clusters,
            "scene_seed": self.scene_seed,
            "images": {str(p): {"cluster": e.cluster, "violations": list(e.violations),
                                "duplicate_group": e.duplicate_group, "rotation": e.rotation}
                       for p, e in sorted(self.entries.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        entries = {int(p): TruthEntry(v["cluster"], tuple(v["violations"]),
                                      v["duplicate_group"], v["rotation"])
                   for p, v in d["images"].items()}
        return cls(entries, d["n_clusters"], d["scene_seed"])


@dataclass
class Scenario:
    task: TaskSpec
    records: list
    truth: GroundTruth


def make_task(cfg: ScenarioConfig) -> TaskSpec:
    return TaskSpec(tid=cfg.tid, formats=frozenset({".png", ".jpg", ".jpeg"}), whr=cfg.target,
                    whn=(TIME_START, TIME_END), d_max=cfg.d_max, d_min=0.0,
                    ang_inter=cfg.ang_inter, alt_range=cfg.alt_range, resol_min=360)


def _minutes(ts: Timestamp) -> int:
    import datetime as dt
    d = dt.datetime(ts.year, ts.month, ts.day, ts.hour, ts.minute)
    return int(d.timestamp() // 60)


def _from_minutes(m: int) -> Timestamp:
    import datetime as dt
    d = dt.datetime.fromtimestamp(m * 60)
    return Timestamp(d.year, d.month, d.day, d.hour, d.minute)


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Build task, records and ground truth for `cfg`; deterministic per seed."""
    cfg.validate()
    place_rng, viol_rng, attr_rng, dup_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4))
    task = make_task(cfg)
    n = cfg.n_images
    scene_seed = cfg.scene_seed if cfg.scene_seed is not None else cfg.seed

    clusters = np.arange(n) % cfg.n_clusters
    place_rng.shuffle(clusters)
    phase = place_rng.uniform(0, 2 * math.pi)
    sector = phase + 2 * math.pi * clusters / cfg.n_clusters
    if cfg.rotation_steps:
        sector = 2 * math.pi * (np.arange(n) % cfg.rotation_steps) / cfg.rotation_steps
    east = cfg.cluster_radius_m * np.sin(sector) + place_rng.normal(0, cfg.cluster_spread_m, n)
    north = cfg.cluster_radius_m * np.cos(sector) + place_rng.normal(0, cfg.cluster_spread_m, n)
    jitter = place_rng.normal(0, cfg.heading_jitter, n)

    lo_m, hi_m = _minutes(TIME_START), _minutes(TIME_END)
    times = attr_rng.integers(lo_m, hi_m + 1, n)
    alts = attr_rng.uniform(cfg.alt_range[0], cfg.alt_range[1], n)
    res_idx = attr_rng.integers(0, len(RESOLUTIONS), n)
    wids = attr_rng.integers(1, 23, n)

    # planted violations
    counts = cfg.violation_counts()
    violations = [set() for _ in range(n)]
    order = viol_rng.permutation(n)
    cursor = 0
    for kind in FILTER_NAMES:
        c = counts[kind]
        if not c:
            continue
        if cfg.disjoint_violations:
            chosen = order[cursor:cursor + c]
            cursor += c
        else:
            chosen = viol_rng.choice(n, size=c, replace=False)
        for i in chosen:
            violations[i].add(kind)

    # duplicate groups among clean records
    dup_group = [None] * n
    clean = [i for i in range(n) if not violations[i]]
    dup_rng.shuffle(clean)
    pos = 0
    for g, size in enumerate(cfg.duplicate_group_sizes):
        members = sorted(clean[pos:pos + size])
        pos += size
        if len(members) < size:
            raise ConfigInvalid("not enough clean records for duplicate groups")
        head = members[0]
        for m in members:
            dup_group[m] = g
            east[m], north[m], jitter[m] = east[head], north[head], jitter[head]
            clusters[m] = clusters[head]

    records, entries = [], {}
    for i in range(n):
        pid = i + 1
        v = violations[i]
        e, no = east[i], north[i]
        if "gps" in v:
            scale = viol_rng.uniform(1.3, 2.0) * cfg.d_max / max(math.hypot(e, no), 1e-9)
            e, no = e * scale, no * scale
        locat = offset_point(cfg.target, e, no)
        if "time" in v:
            delta = int(viol_rng.integers(1, 240))
            t = _from_minutes(hi_m + delta if viol_rng.random() < 0.5 else lo_m - delta)
        else:
            t = _from_minutes(int(times[i]))
        heig = float(alts[i])
        if "altitude" in v:
            heig = float(cfg.alt_range[1] + viol_rng.uniform(1.0, 30.0))
        w, h = RESOLUTIONS[res_idx[i]]
        if "resolution" in v:
            w, h = LOW_RESOLUTIONS[int(viol_rng.integers(0, len(LOW_RESOLUTIONS)))]
        fmt = ".gif" if "format" in v else ".png"
        tid = cfg.tid + 1 if "task-mismatch" in v else cfg.tid
        # camera looks at the target; the view angle on the object is the
        # bearing from the target to the camera
        view_angle = float(math.atan2(e, no) % (2 * math.pi))
        heading = float((view_angle + math.pi + jitter[i]) % (2 * math.pi))
        records.append(ImageRecord(pid=pid, tid=tid, wid=int(wids[i]), format=fmt, time=t,
                                   locat=locat, heig=heig, resol=Resolution(w, h),
                                   heading=heading, path=f"images/{pid}.png"))
        entries[pid] = TruthEntry(int(clusters[i]), tuple(sorted(v)), dup_group[i],
                                  view_angle if dup_group[i] is None else None)
    # duplicates share the head's exact view angle
    for i in range(n):
        if dup_group[i] is not None:
            head = min(j for j in range(n) if dup_group[j] == dup_group[i])
            entries[i + 1].rotation = float(math.atan2(east[head], north[head]) % (2 * math.pi))
    return Scenario(task, records, GroundTruth(entries, cfg.n_clusters, scene_seed))


def gen_manifest(cfg: ScenarioConfig):
    """Return ``(manifest_text, ground_truth)``."""
    sc = generate_scenario(cfg)
    return serialize_manifest(sc.records), sc.truth


def write_scenario(cfg: ScenarioConfig, out_dir, render: bool = True) -> Scenario:
    """Write ``task.txt``, ``manifest.jsonl``, ``truth.json`` and rendered images."""
    from PIL import Image

    from .render import render_view

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = generate_scenario(cfg)
    (out / "task.txt").write_text(serialize_task_spec(sc.task), encoding="utf-8")
    (out / "manifest.jsonl").write_text(serialize_manifest(sc.records), encoding="utf-8")
    (out / "truth.json").write_text(json.dumps(sc.truth.to_dict(), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    if render:
        (out / "images").mkdir(exist_ok=True)
        for r in sc.records:
            rot = sc.truth.entries[r.pid].rotation
            img = render_view(sc.truth.scene_seed, rotation=rot, size=cfg.image_size)
            arr = np.round(img.pixels * 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(out / r.path, optimize=False)
    return sc


def load_config(path) -> ScenarioConfig:
    return ScenarioConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def recheck_truth(records, task: TaskSpec, truth: GroundTruth) -> list:
    """Independently re-derive violations from raw fields; returns mismatching pids."""
    from .metadata import geo_distance

    bad = []
    for r in records:
        found = set()
        if r.format.lower() not in task.formats:
            found.add("format")
        if not (task.whn[0] <= r.time <= task.whn[1]):
            found.add("time")
        if not (task.d_min <= geo_distance(r.locat, task.whr) <= task.d_max):
            found.add("gps")
        if task.alt_range and not (task.alt_range[0] <= r.heig <= task.alt_range[1]):
            found.add("altitude")
        if min(r.resol.width, r.resol.height) < task.resol_min:
            found.add("resolution")
        if r.tid != task.tid:
            found.add("task-mismatch")
        if found != set(truth.entries[r.pid].violations):
            bad.append(r.pid)
    return bad


def config_to_dict(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    d["target"] = {"lat": cfg.target.lat, "lon": cfg.target.lon}
    d["alt_range"] = list(cfg.alt_range)
    return d
