import csv

import pytest

from fdg.partition import delay_of
from fdg.speedup import (CostProfile, backward_gaps, ideal_speedup, method_time, profile_from_report,
                         simulate_pipeline)
from fdg.trainlog import ThroughputReport


def test_ideal_speedup_table_rows():
    for K in range(1, 9):
        assert ideal_speedup("fdg", K, 1.3, 2.9) == K
    assert ideal_speedup("ddg", 2, 1.0, 1.0) == 4 / 3
    assert method_time("fr", 4, 1.0, 2.0) == 1.0 + 3.0 / 4
    assert method_time("lel", 4, 1.0, 2.0, 0.5) == 3.0 / 4 + 0.5
    assert method_time("bp", 4, 1.0, 2.0) == 3.0


def test_k1_is_one_without_recomputation():
    for m in ("bp", "ddg", "lel", "fdg"):
        assert ideal_speedup(m, 1, 1.0, 2.0, 0.0) == 1.0
    # the FR row keeps its extra forward outside the division, even at K=1
    assert ideal_speedup("fr", 1, 1.0, 2.0, 0.0) == 3.0 / 4.0


def test_ideal_speedup_errors():
    with pytest.raises(ValueError):
        ideal_speedup("fdg", 0)
    with pytest.raises(ValueError):
        ideal_speedup("pipedream", 2)
    with pytest.raises(ValueError):
        ideal_speedup("ddg", 2, 0.0, 1.0)


@pytest.mark.parametrize("schedule", ["fdg-lockstep", "fdg-freerun"])
def test_k1_makespan_exact(schedule):
    T = 137
    _, stats = simulate_pipeline(CostProfile.uniform(1, 1.0, 2.0), T, schedule)
    assert stats["makespan"] == T * 3.0


@pytest.mark.parametrize("schedule", ["fdg-lockstep", "fdg-freerun"])
@pytest.mark.parametrize("K", [2, 3, 4, 8])
def test_zero_comm_reaches_k(schedule, K):
    tl, stats = simulate_pipeline(CostProfile.uniform(K, 1.0, 2.0), 1000, schedule)
    tl.validate()
    assert abs(stats["speedup"] - K) / K < 0.01
    _, short = simulate_pipeline(CostProfile.uniform(K, 1.0, 2.0), 100, schedule)
    assert abs(short["speedup"] - K) / K < 0.01


@pytest.mark.parametrize("schedule", ["fdg-lockstep", "fdg-freerun"])
def test_comm_cost_monotone(schedule):
    rates = [simulate_pipeline(CostProfile.uniform(4, 1.0, 2.0, tc), 400, schedule)[1]["speedup"]
             for tc in (0.0, 0.05, 0.1, 0.2, 0.4)]
    assert all(r < 4.0 for r in rates[1:])
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_lockstep_gaps_follow_delay():
    K = 4
    tl, _ = simulate_pipeline(CostProfile.uniform(K), 60, "fdg-lockstep")
    assert backward_gaps(tl) == {k: [delay_of(k, K)] for k in range(1, K + 1)}


@pytest.mark.parametrize("ordering", ["backward-first", "forward-first"])
def test_lockstep_top_utilization_at_least_bottom(ordering):
    _, stats = simulate_pipeline(CostProfile.uniform(4, 1.0, 2.0), 200, "fdg-lockstep", ordering)
    assert stats["utilization"][-1] >= stats["utilization"][0]


def test_freerun_timeline_valid_and_ordered():
    tl, stats = simulate_pipeline(CostProfile([1.0, 0.5, 2.0], [2.0, 1.0, 1.0], comm=0.3), 80)
    tl.validate()
    assert stats["items"] == 80 - 3 + 1
    for ivs in tl.workers:
        assert all(iv.tag in ("fwd", "bwd", "idle") for iv in ivs)
        assert ivs[0].start == 0.0
    # the slowest module bounds throughput
    assert stats["items_per_time"] <= 1 / 3.0 + 1e-9
    assert all(b.end - b.start == pytest.approx(0.3) for _, b in tl.links)


def test_timeline_csv(tmp_path):
    tl, _ = simulate_pipeline(CostProfile.uniform(2, 1.0, 2.0, 0.1), 10)
    path = tmp_path / "t.csv"
    tl.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["worker", "start", "end", "tag", "batch-id"]
    assert {r[0] for r in rows[1:]} >= {"1", "2", "link-2", "link-1"}


def test_profile_validation_and_calibration():
    with pytest.raises(ValueError):
        CostProfile([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        CostProfile([-1.0], [1.0])
    rep = ThroughputReport(K=2, items=11, wall_s=1.0, busy_ms=[0, 0], fwd_ms=[11.0, 20.0],
                           bwd_ms=[22.0, 40.0], idle_ms=[0, 0])
    p = profile_from_report(rep)
    assert p.fwd == [1.0, 2.0] and p.bwd == [2.0, 4.0]


def test_unknown_schedule():
    with pytest.raises(ValueError):
        simulate_pipeline(CostProfile.uniform(2), 10, "gpipe")
