import csv
import io
import random

import pytest
from hypothesis import given, settings, strategies as st

from freesim import cli, metrics
from freesim.engine import ScenarioConfig, TraceRecord, run_scenario
from freesim.phy import LinkBudget


def small(seed, **kw):
    return run_scenario(ScenarioConfig("free", seed=seed, n_devices=15, **kw))


def test_aggregate_two_seeds_and_duplicates():
    a, b = small(1), small(2)
    row = metrics.aggregate([a, b])
    assert row.n == 2
    assert row.mean["energy_j"] == pytest.approx((a.energy_j + b.energy_j) / 2)
    assert row.std["energy_j"] > 0
    dup = metrics.aggregate([a, a, a])
    assert all(v == 0.0 for v in dup.std.values() if v is not None)


def test_aggregate_rejects_mixed_points():
    with pytest.raises(ValueError):
        metrics.aggregate([small(1), run_scenario(ScenarioConfig("free", seed=1, n_devices=16))])
    with pytest.raises(ValueError):
        metrics.aggregate([])


@settings(max_examples=1000)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12), st.randoms())
def test_mean_std_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert metrics.mean_std(values) == metrics.mean_std(shuffled)
    assert metrics.mean_std(values)[1] >= 0


def test_grid_one_point_two_seeds_is_stable():
    grid = metrics.ExperimentGrid(["free-a0"], ["confirmed"], [15], [24], [1, 2])
    rows, errors = metrics.run_grid(grid)
    assert not errors and len(rows) == 1
    text = metrics.grid_csv(rows)
    assert text == metrics.grid_csv(metrics.run_grid(grid)[0])
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert tuple(parsed[0]) == metrics.GRID_COLUMNS
    assert parsed[0]["scheme"] == "free-a0" and float(parsed[0]["ddr_std"]) >= 0


def test_grid_order_and_missing_airtime_cell():
    grid = metrics.ExperimentGrid(["legacy", "free-a1"], ["unconfirmed"], [12, 10], [24], [1])
    rows, _ = metrics.run_grid(grid)
    assert [(r.scheme, r.n_devices) for r in rows] == [("legacy", 12), ("legacy", 10),
                                                       ("free-a1", 12), ("free-a1", 10)]
    assert rows[0].csv_cells()[9] == ""


def test_grid_validation():
    with pytest.raises(ValueError):
        metrics.ExperimentGrid(seeds=[1, 1])
    with pytest.raises(ValueError):
        metrics.ExperimentGrid(schemes=[])
    with pytest.raises(ValueError):
        metrics.ExperimentGrid(schemes=["aloha"])


def test_grid_reports_failed_points():
    grid = metrics.ExperimentGrid(["free-a0"], ["confirmed"], [10], [24], [1],
                                  base={"max_concurrent": 0})
    rows, errors = metrics.run_grid(grid)
    assert rows == [] and len(errors) == 1


def test_sweep_argmin_matches_optimizer():
    from freesim import scheduler
    from freesim.phy import RadioParams
    rows = metrics.packet_length_sweep(1500)
    marks = metrics.sweep_argmins(rows)
    cfg = scheduler.SchedulerConfig(radio=RadioParams(7, 125_000))
    assert marks == {sf: scheduler.optimal_packet_length(1500, sf, cfg) for sf in range(7, 13)}
    assert {r[1] for r in rows} == set(range(20, 256))


def test_ideal_link_sweep():
    # 1482 B is six full packets, so nothing shorter than 255 can match it
    rows = metrics.packet_length_sweep(1482, ideal_link=True)
    assert set(metrics.sweep_argmins(rows).values()) == {255}
    for sf in range(7, 13):
        e = [r[2] for r in rows if r[0] == sf]
        # the lower envelope falls as packets get longer
        assert min(e[:50]) > min(e[-50:])


def test_sweep_csv_is_bit_stable():
    a = metrics.sweep_csv(metrics.packet_length_sweep(1500, [7, 12]))
    assert a == metrics.sweep_csv(metrics.packet_length_sweep(1500, [7, 12]))
    assert a.splitlines()[0] == "sf,packet_length,energy_j,argmin"


def test_duty_audit_flags_early_resend():
    tr = [TraceRecord(0.0, 3, 7, 1, 14.0, "ok", 10.0, "data"),
          TraceRecord(999.0, 3, 7, 1, 14.0, "ok", 10.0, "data"),
          TraceRecord(500.0, 3, 7, 2, 14.0, "ok", 10.0, "data"),
          TraceRecord(0.0, -1, 7, 4, 14.0, "sent", 10.0, "ack"),
          TraceRecord(100.0, -1, 7, 4, 14.0, "sent", 10.0, "ack")]
    assert metrics.duty_violations(tr) == [(3, 1, 999.0, 1000.0)]


def test_overlap_checker_uses_running_reach():
    long_one = TraceRecord(0.0, 1, 9, 2, 13.0, "ok", 100.0, "data")
    short = TraceRecord(10.0, 2, 9, 2, 13.0, "ok", 5.0, "data")
    late = TraceRecord(50.0, 3, 9, 2, 13.0, "ok", 5.0, "data")  # overlaps long_one only
    other_sf = TraceRecord(20.0, 4, 10, 2, 14.0, "ok", 5.0, "data")
    bad = metrics.same_sf_overlaps([long_one, short, late, other_sf])
    assert [(a.device, b.device) for a, b in bad] == [(1, 2), (1, 3)]


# --- configuration and CLI -------------------------------------------------------

def test_empty_file_needs_scheme():
    with pytest.raises(cli.ConfigError, match="scheme"):
        cli.parse_scenario("")


def test_resolved_dump_echoes_values():
    cfg = cli.parse_scenario("devices=1000\nscheme=free\nalpha=1\n")
    dump = cli.dump_config(cfg)
    assert "n_devices=1000\n" in dump and "scheme=free\n" in dump and "alpha=1\n" in dump
    assert "bandwidth_hz=500000\n" in dump


def test_overrides_win_and_errors_name_the_line():
    cfg = cli.parse_scenario("scheme=legacy\nn_devices=5\n", ["n_devices=7"])
    assert cfg.n_devices == 7
    with pytest.raises(cli.ConfigError, match=r":2: unknown key 'colour'"):
        cli.parse_scenario("scheme=free\ncolour=red\n")
    with pytest.raises(cli.ConfigError, match="n_devices"):
        cli.parse_scenario("scheme=free\ndevices=zero\n")
    with pytest.raises(cli.ConfigError, match="positive"):
        cli.parse_scenario("scheme=free\ndevices=0\n")
    with pytest.raises(cli.ConfigError, match="expected key=value"):
        cli.parse_scenario("scheme free\n")


def test_cli_verbs_and_exit_codes(tmp_path, capsys):
    trace = tmp_path / "t.tsv"
    assert cli.main(["run", "--scheme", "free", "--devices", "12", "--trace-out", str(trace)]) == 0
    out = capsys.readouterr().out
    assert "n_devices=12" in out
    assert cli.main(["audit", str(trace), "--scheduled"]) == 0
    assert "duty_violations=0" in capsys.readouterr().out
    cfg = tmp_path / "c.cfg"
    cfg.write_text("scheme=free\nbogus=1\n")
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert cli.main(["fig3", "--sfs", "7", "--out", str(tmp_path / "f.csv")]) == 0
    assert (tmp_path / "f.csv").read_text().count("\n") == 1 + 236
    assert cli.main(["grid", "--schemes", "free-a0", "--traffic", "confirmed", "--devices", "10",
                     "--seeds", "2", "--out", str(tmp_path / "g.csv")]) == 0
    assert cli.main(["grid", "--schemes", "free-a0", "--devices", "10", "--seeds", "1",
                     "--max-concurrent", "0"]) == 1
    assert cli.main(["grid", "--set", "seed=3"]) == 2


def test_audit_exit_code_on_violation(tmp_path):
    from freesim.engine import format_trace
    bad = tmp_path / "bad.tsv"
    bad.write_text(format_trace([TraceRecord(0.0, 1, 7, 1, 14.0, "ok", 10.0, "data"),
                                 TraceRecord(5.0, 1, 7, 1, 14.0, "ok", 10.0, "data")]))
    assert cli.main(["audit", str(bad)]) == 1
