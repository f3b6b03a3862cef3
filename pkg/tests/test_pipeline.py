import json
import math
import subprocess
import sys
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest

from triselect.cache import CacheFormatError, decode, encode
from triselect.errors import MissingStage
from triselect.metadata import offset_point
from triselect.pipeline import PipelineConfig, TriSelect, angular_coverage, run_pipeline
from triselect.plots import emit_plots, silhouette_svg
from triselect.render import render_view
from triselect.synth import ScenarioConfig, generate_scenario, write_scenario
from triselect.visual import extract_features


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenario")
    cfg = ScenarioConfig(seed=11, n_images=24, n_clusters=3, image_size=96,
                         violation_rates={"gps": 0.1, "resolution": 0.1})
    write_scenario(cfg, root)
    return root


def cli(*args):
    return subprocess.run([sys.executable, "-m", "triselect.cli", *map(str, args)],
                          capture_output=True, text=True)


def run_args(sc, out, *extra):
    return ["run", "--task", sc / "task.txt", "--manifest", sc / "manifest.jsonl",
            "--images", sc, "--out", out, *extra]


def masked(path):
    report = json.loads(path.read_text())
    report.pop("timings_ms")
    return report


def test_cli_full_run(scenario, tmp_path):
    proc = cli(*run_args(scenario, tmp_path, "--budget", "5", "--plots"))
    assert proc.returncode == 0, proc.stderr
    report = json.loads((tmp_path / "report.json").read_text())
    for name in ("stage1_report.json", "stage2_report.json", "stage3_report.json",
                 "silhouette.svg", "clusters.svg"):
        assert (tmp_path / name).is_file()
    counts = report["counts"]
    assert counts["P"] >= counts["P_v"] >= counts["clustered"] >= counts["P_r"]
    assert counts["P_r"] <= 5
    assert all(v >= 0 for v in report["timings_ms"].values())
    assert len(list((tmp_path / "selected").iterdir())) == counts["P_r"]


def test_flow_conservation(scenario, tmp_path):
    run_pipeline(PipelineConfig(scenario / "task.txt", scenario / "manifest.jsonl", scenario,
                                tmp_path, budget=6))
    report = json.loads((tmp_path / "report.json").read_text())
    manifest = {json.loads(l)["pid"] for l in (scenario / "manifest.jsonl").read_text().splitlines()}
    rejected = {e["pid"] for e in report["stage1"]["rejected"]}
    kept = manifest - rejected
    clustered = {int(p) for p in report["stage2"]["assignment"]["labels"]}
    selected = set(report["stage3"]["selected"])
    assert selected <= clustered <= kept <= manifest
    for c, pids in report["stage3"]["per_cluster"].items():
        assert all(report["stage2"]["assignment"]["labels"][str(p)] == int(c) for p in pids)


@pytest.mark.parametrize("stages,present,absent", [
    ("1", ["stage1"], ["stage2", "stage3"]),
    ("12", ["stage1", "stage2"], ["stage3"]),
])
def test_stage_toggles(scenario, tmp_path, stages, present, absent):
    proc = cli(*run_args(scenario, tmp_path, "--stages", stages))
    assert proc.returncode == 0, proc.stderr
    report = json.loads((tmp_path / "report.json").read_text())
    for key in present:
        assert key in report and (tmp_path / f"{key}_report.json").is_file()
    for key in absent:
        assert key not in report and not (tmp_path / f"{key}_report.json").exists()


def test_idempotent_and_thread_independent(scenario, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli(*run_args(scenario, a, "--threads", "1")).returncode == 0
    assert cli(*run_args(scenario, b, "--threads", "3")).returncode == 0
    assert masked(a / "report.json") == masked(b / "report.json")
    for name in ("stage1_report.json", "stage2_report.json", "stage3_report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_undecodable_image_is_excluded(scenario, tmp_path):
    sc = tmp_path / "sc"
    write_scenario(ScenarioConfig(seed=12, n_images=12, n_clusters=2, image_size=96), sc)
    (sc / "images" / "3.png").write_bytes(b"not a png")
    proc = cli(*run_args(sc, tmp_path / "out"))
    assert proc.returncode == 0, proc.stderr
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert 3 in [e["pid"] for e in report["stage3"]["excluded"]]
    assert 3 not in report["stage3"]["selected"]


def test_all_images_undecodable_is_input_error(tmp_path):
    sc = tmp_path / "sc"
    write_scenario(ScenarioConfig(seed=13, n_images=4, n_clusters=1), sc, render=False)
    (sc / "images").mkdir()
    for i in range(1, 5):
        (sc / "images" / f"{i}.png").write_bytes(b"\x00" * 10)
    proc = cli(*run_args(sc, tmp_path / "out"))
    assert proc.returncode == 3
    assert "pid 1" in proc.stderr


def test_exit_codes(scenario, tmp_path):
    assert cli(*run_args(scenario, tmp_path, "--budget", "0")).returncode == 2
    assert cli(*run_args(scenario, tmp_path, "--stages", "23")).returncode == 2
    assert cli(*run_args(scenario, tmp_path, "--tau", "1.5")).returncode == 2
    bad_task = tmp_path / "task.txt"
    bad_task.write_text("tid = 1\n")
    proc = cli("run", "--task", bad_task, "--manifest", scenario / "manifest.jsonl",
               "--images", scenario, "--out", tmp_path)
    assert proc.returncode == 2
    bad_manifest = tmp_path / "m.jsonl"
    bad_manifest.write_text("{oops\n")
    proc = cli("run", "--task", scenario / "task.txt", "--manifest", bad_manifest,
               "--images", scenario, "--out", tmp_path)
    assert proc.returncode == 3
    assert "line 1" in proc.stderr


def test_empty_stage_input(scenario, tmp_path):
    task = (scenario / "task.txt").read_text()
    narrowed = tmp_path / "task.txt"
    narrowed.write_text("\n".join(l if not l.startswith("formats") else "formats = .tif"
                                  for l in task.splitlines()) + "\n")
    proc = cli("run", "--task", narrowed, "--manifest", scenario / "manifest.jsonl",
               "--images", scenario, "--out", tmp_path / "o", "--stages", "12")
    assert proc.returncode == 4
    assert "EmptyStageInput: stage II" in proc.stderr


def test_synth_command(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 2, "n_images": 5, "n_clusters": 1, "image_size": 48}))
    proc = cli("synth", "--config", cfg, "--out", tmp_path / "s")
    assert proc.returncode == 0, proc.stderr
    assert len(list((tmp_path / "s" / "images").iterdir())) == 5
    cfg.write_text(json.dumps({"seed": 2, "n_images": 0}))
    assert cli("synth", "--config", cfg, "--out", tmp_path / "t").returncode == 2


def test_descriptor_cache_keeps_output_fixed(scenario, tmp_path):
    cache = tmp_path / "cache"
    for out in ("a", "b"):
        run_pipeline(PipelineConfig(scenario / "task.txt", scenario / "manifest.jsonl", scenario,
                                    tmp_path / out, cache_dir=cache))
    assert masked(tmp_path / "a" / "report.json") == masked(tmp_path / "b" / "report.json")
    assert any(p.suffix == ".tsdc" for p in cache.iterdir())


def test_cache_format_round_trip():
    ds = extract_features(render_view(4, size=96), pid=4)
    data = encode(ds)
    assert data[:4] == b"TSDC"
    assert int.from_bytes(data[4:6], "little") == 1
    back = decode(data, pid=4)
    assert len(back) == len(ds)
    np.testing.assert_allclose(back.descriptors, ds.descriptors, atol=1e-6)
    with pytest.raises(CacheFormatError):
        decode(b"XXXX" + data[4:])
    with pytest.raises(CacheFormatError):
        decode(data[:-4])


# -- plots ----------------------------------------------------------------

def test_silhouette_svg_tallest_bar():
    svg = silhouette_svg({2: 0.4, 3: 0.6, 4: 0.7})
    root = ET.fromstring(svg.encode())
    bars = [e for e in root.iter() if e.get("class") == "bar"]
    heights = {int(b.get("data-k")): float(b.get("height")) for b in bars}
    assert max(heights, key=heights.get) == 4


def test_plots_need_stage2(tmp_path):
    with pytest.raises(MissingStage):
        emit_plots({"stage1": {}}, tmp_path)


def test_plots_byte_identical(scenario, tmp_path):
    for out in ("a", "b"):
        assert cli(*run_args(scenario, tmp_path / out, "--stages", "12", "--plots")).returncode == 0
    for name in ("silhouette.svg", "clusters.svg"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        ET.fromstring(a)


# -- coverage and estimator -----------------------------------------------

def test_angular_coverage():
    sc = generate_scenario(ScenarioConfig(seed=1, n_images=8, n_clusters=4))
    task = sc.task
    # points at the centres of sectors 0 and 2 (pi/4 wide, clockwise from north)
    spots = [offset_point(task.whr, 10 * math.sin(a), 10 * math.cos(a))
             for a in (math.pi / 8, 5 * math.pi / 8)]
    recs = [replace(r, locat=p) for r, p in zip(sc.records, spots)]
    cov = angular_coverage(recs, task)
    assert cov["sectors"] == 8
    assert cov["covered"] == 2
    assert cov["sector_ids"] == [0, 2]
    assert cov["fraction"] == 0.25


def test_triselect_estimator():
    sc = generate_scenario(ScenarioConfig(seed=21, n_images=18, n_clusters=3))
    images = {r.pid: render_view(sc.truth.scene_seed, rotation=sc.truth.entries[r.pid].rotation,
                                 size=96) for r in sc.records}
    est = TriSelect(task=sc.task, budget=4, random_state=0).fit(sc.records, images)
    assert len(est.selected_) <= 4
    assert len(set(est.labels_)) == 3
    assert set(est.selected_) <= {r.pid for r in est.kept_}
    assert est.get_params()["budget"] == 4
