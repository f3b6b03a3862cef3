import itertools
import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triselect.metadata import GeoPoint, ImageRecord, Resolution, TaskSpec, Timestamp, offset_point
from triselect.prefilter import (
    FILTER_NAMES,
    MetadataPreselector,
    evaluate_filters,
    filter_altitude,
    filter_format,
    filter_resolution,
    filter_spatiotemporal,
    preselect,
)
from triselect.synth import ScenarioConfig, generate_scenario

TARGET = GeoPoint(34.246, 108.904)
TASK = TaskSpec(tid=1, formats=frozenset({".jpg", ".jpeg"}), whr=TARGET,
                whn=(Timestamp.parse("202403141000"), Timestamp.parse("202403141800")),
                d_max=50.0, alt_range=(0.0, 20.0), ang_inter=math.pi / 4)


def rec(pid=101, **kw):
    base = dict(pid=pid, tid=1, wid=5, format=".jpg", time=Timestamp.parse("202403141530"),
                locat=offset_point(TARGET, 10, 0), heig=10.2, resol=Resolution(1920, 1080))
    base.update(kw)
    return ImageRecord(**base)


def test_filter_format():
    assert filter_format(rec(format=".jpg"), TASK)
    assert filter_format(rec(format=".PNG"), replace(TASK, formats=frozenset({".png"})))
    assert not filter_format(rec(format=".gif"), replace(TASK, formats=frozenset({".jpg"})))


def test_filter_time_window():
    assert filter_spatiotemporal(rec(), TASK)[0]
    assert filter_spatiotemporal(rec(time=TASK.whn[0]), TASK)[0]
    assert filter_spatiotemporal(rec(time=TASK.whn[1]), TASK)[0]
    assert not filter_spatiotemporal(rec(time=Timestamp.parse("202403141801")), TASK)[0]


def test_filter_gps_radius():
    # 1e-3 deg east of the target is ~92 m away, outside d_max = 50
    far = rec(locat=GeoPoint(34.246, 108.905))
    assert not filter_spatiotemporal(far, TASK)[1]
    assert filter_spatiotemporal(far, replace(TASK, d_max=100.0))[1]
    assert not filter_spatiotemporal(rec(locat=TARGET), replace(TASK, d_min=5.0))[1]


def test_filter_altitude():
    assert filter_altitude(rec(heig=10.2), TASK)
    assert filter_altitude(rec(heig=500.0), replace(TASK, alt_range=None))
    assert filter_altitude(rec(heig=20.0), TASK)
    assert not filter_altitude(rec(heig=20.01), TASK)


def test_filter_resolution():
    assert filter_resolution(rec(resol=Resolution(1920, 1080)), TASK)
    assert filter_resolution(rec(resol=Resolution(960, 540)), TASK)
    assert not filter_resolution(rec(resol=Resolution(640, 352)), TASK)


def test_single_planted_violations():
    records = [
        rec(1, format=".gif"),
        rec(2, time=Timestamp.parse("202403150900")),
        rec(3, locat=offset_point(TARGET, 80, 0)),
        rec(4, heig=35.0),
        rec(5, resol=Resolution(640, 352)),
        rec(6),
    ]
    kept, report = preselect(records, TASK)
    assert [r.pid for r in kept] == [6]
    failures = dict(report.rejected)
    assert failures == {1: {"format"}, 2: {"time"}, 3: {"gps"}, 4: {"altitude"}, 5: {"resolution"}}
    assert report.kept_count + len(report.rejected) == report.original_count


def test_task_mismatch_is_reported():
    kept, report = preselect([rec(1, tid=2), rec(2)], TASK)
    assert [r.pid for r in kept] == [2]
    assert report.rejected == [(1, frozenset({"task-mismatch"}))]


def test_empty_input():
    kept, report = preselect([], TASK)
    assert kept == []
    assert report.reduction_rate == 0.0


def test_npu_style_reduction():
    # 40 single violations among 137 records leave 97
    rates = {k: 8 / 137 for k in ("format", "time", "gps", "altitude", "resolution")}
    sc = generate_scenario(ScenarioConfig(seed=5, n_images=137, violation_rates=rates))
    kept, report = preselect(sc.records, sc.task)
    assert len(kept) == 97
    assert report.reduction_rate == pytest.approx(0.292, abs=0.001)


def test_report_serialization():
    _, report = preselect([rec(1, format=".gif"), rec(2)], TASK)
    d = report.to_dict()
    assert d["original_count"] == 2 and d["kept_count"] == 1
    assert d["per_filter_pass_counts"]["format"] == 1
    assert d["rejected"] == [{"pid": 1, "failed": ["format"]}]
    assert d["reduction_rate"] == 0.5


def test_estimator_interface():
    records = [rec(1, format=".gif"), rec(2), rec(3)]
    sel = MetadataPreselector(task=TASK)
    assert [r.pid for r in sel.fit_transform(records)] == [2, 3]
    assert sel.report_.kept_count == 2
    assert sel.get_params() == {"task": TASK}
    assert [r.pid for r in sel.transform([rec(9), rec(10, heig=-3.0)])] == [9]


# -- properties ------------------------------------------------------------

@st.composite
def record_lists(draw):
    n = draw(st.integers(0, 25))
    out = []
    for pid in range(n):
        out.append(rec(
            pid,
            tid=draw(st.sampled_from([1, 1, 1, 2])),
            format=draw(st.sampled_from([".jpg", ".JPEG", ".png", ".gif"])),
            time=Timestamp.parse(f"20240314{draw(st.integers(8, 19)):02d}{draw(st.integers(0, 59)):02d}"),
            locat=offset_point(TARGET, draw(st.floats(-90, 90)), draw(st.floats(-90, 90))),
            heig=draw(st.floats(-5, 30)),
            resol=Resolution(draw(st.integers(100, 4000)), draw(st.integers(100, 4000))),
        ))
    return out


@given(record_lists())
@settings(max_examples=60, deadline=None)
def test_report_matches_independent_rescan(records):
    kept, report = preselect(records, TASK)
    for name in FILTER_NAMES:
        expected = sum(evaluate_filters(r, TASK)[name] for r in records)
        assert report.per_filter_pass_counts[name] == expected
    assert report.kept_count + len(report.rejected) == len(records)
    assert all(failed for _, failed in report.rejected)
    assert 0.0 <= report.reduction_rate <= 1.0


@given(record_lists())
@settings(max_examples=40, deadline=None)
def test_predicate_order_independence(records):
    kept, _ = preselect(records, TASK)
    checks = [
        lambda r: filter_format(r, TASK),
        lambda r: filter_spatiotemporal(r, TASK)[0],
        lambda r: filter_spatiotemporal(r, TASK)[1],
        lambda r: filter_altitude(r, TASK),
        lambda r: filter_resolution(r, TASK),
        lambda r: r.tid == TASK.tid,
    ]
    want = [r.pid for r in kept]
    for perm in itertools.islice(itertools.permutations(checks), 0, 720, 97):
        got = [r.pid for r in records if all(c(r) for c in perm)]
        assert got == want


@given(record_lists(), st.floats(0, 40), st.floats(0, 10), st.integers(0, 400))
@settings(max_examples=60, deadline=None)
def test_monotone_in_constraints(records, extra_radius, extra_alt, lower_res):
    kept, _ = preselect(records, TASK)
    looser = replace(
        TASK,
        whn=(Timestamp.parse("202403140800"), Timestamp.parse("202403142000")),
        d_max=TASK.d_max + extra_radius,
        alt_range=(TASK.alt_range[0] - extra_alt, TASK.alt_range[1] + extra_alt),
        formats=TASK.formats | {".png"},
        resol_min=max(0, TASK.resol_min - lower_res),
    )
    kept2, _ = preselect(records, looser)
    assert {r.pid for r in kept} <= {r.pid for r in kept2}
