"""Experiment grids, aggregation over seeds, CSV output and trace audits."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from . import phy, scheduler
from .engine import CHANNEL_DUTY, GATEWAY, MetricsReport, ScenarioConfig, TraceRecord, run_scenario
from .phy import LinkBudget, RadioParams

# label -> (scheme, alpha)
SCHEME_LABELS = {"legacy": ("legacy", 0), "delayed": ("delayed", 0), "free-a0": ("free", 0),
                 "free-a1": ("free", 1)}

GRID_COLUMNS = ("scheme", "traffic", "n_devices", "period_h", "ddr_mean", "ddr_std",
                "energy_j_mean", "lifetime_y_mean", "collection_s_mean", "airtime_eff_mean",
                "collisions_mean", "lost_mean", "noack_mean", "join_tx_per_device_mean")

AGGREGATED = ("ddr", "energy_j", "lifetime_y", "collection_s", "airtime_eff", "collisions",
              "lost", "noack", "join_tx_per_device")


def fmt(value) -> str:
    """Shortest round-trip decimal for floats, empty cell for missing values."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    # fsum is exactly rounded, so the result does not depend on seed order
    n = len(values)
    if n == 0:
        raise ValueError("no values to aggregate")
    if min(values) == max(values):
        return float(values[0]), 0.0
    m = math.fsum(values) / n
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in values) / (n - 1))


@dataclass(frozen=True)
class AggregateRow:
    scheme: str
    traffic: str
    n_devices: int
    period_h: float
    n: int
    mean: Dict[str, Optional[float]]
    std: Dict[str, Optional[float]]

    def csv_cells(self) -> List[str]:
        cells = [self.scheme, self.traffic, str(self.n_devices), fmt(float(self.period_h))]
        for col in GRID_COLUMNS[4:]:
            metric, kind = col.rsplit("_", 1)
            cells.append(fmt((self.mean if kind == "mean" else self.std)[metric]))
        return cells


def metric_value(report: MetricsReport, name: str) -> Optional[float]:
    v = report.join_tx_per_device if name == "join_tx_per_device" else getattr(report, name)
    return None if v is None else float(v)


def aggregate(reports: Sequence[MetricsReport]) -> AggregateRow:
    if not reports:
        raise ValueError("no runs to aggregate")
    first = reports[0]
    key = (first.scheme, first.traffic, first.n_devices, first.period_h)
    if any((r.scheme, r.traffic, r.n_devices, r.period_h) != key for r in reports):
        raise ValueError("runs belong to different grid points")
    mean, std = {}, {}
    for name in AGGREGATED:
        values = [metric_value(r, name) for r in reports]
        if any(v is None for v in values):
            mean[name] = std[name] = None
        else:
            mean[name], std[name] = mean_std(values)
    return AggregateRow(*key, len(reports), mean, std)


@dataclass
class ExperimentGrid:
    schemes: Sequence[str] = ("legacy", "delayed", "free-a0", "free-a1")
    traffic: Sequence[str] = ("unconfirmed", "confirmed")
    n_devices: Sequence[int] = (10, 100, 500, 1000, 2000)
    period_h: Sequence[float] = (24,)
    seeds: Sequence[int] = tuple(range(1, 11))
    base: dict = field(default_factory=dict)
    output: Optional[str] = None

    def __post_init__(self):
        for name in ("schemes", "traffic", "n_devices", "period_h", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name} is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        unknown = [s for s in self.schemes if s not in SCHEME_LABELS]
        if unknown:
            raise ValueError(f"unknown scheme labels {unknown}; use {sorted(SCHEME_LABELS)}")

    def points(self) -> List[Tuple[str, str, int, float]]:
        return [(s, t, n, p) for s in self.schemes for t in self.traffic
                for n in self.n_devices for p in self.period_h]

    def config(self, point, seed: int) -> ScenarioConfig:
        label, traffic, n, period = point
        scheme, alpha = SCHEME_LABELS[label]
        return ScenarioConfig(**{**self.base, "scheme": scheme, "alpha": alpha, "traffic": traffic,
                                 "n_devices": n, "period_h": period, "seed": seed})


def _run_point(args):
    grid, point = args
    try:
        return point, aggregate([run_scenario(grid.config(point, s)) for s in grid.seeds]), None
    except Exception as exc:  # reported per point, the rest of the grid still runs
        return point, None, f"{type(exc).__name__}: {exc}"


def run_grid(grid: ExperimentGrid, workers: int = 1, progress=None):
    """Returns (rows in grid order, {point: error message})."""
    points = grid.points()
    jobs = [(grid, p) for p in points]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_point(job))
            if progress:
                progress(results[-1])
    order = {p: i for i, p in enumerate(points)}
    results.sort(key=lambda r: order[r[0]])
    rows = [r for _, r, err in results if r is not None]
    errors = {p: err for p, _, err in results if err is not None}
    return rows, errors


def grid_csv(rows: Iterable[AggregateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_COLUMNS)
    for row in rows:
        w.writerow(row.csv_cells())
    return buf.getvalue()


# --- packet length sweep -------------------------------------------------------

FIG3_COLUMNS = ("sf", "packet_length", "energy_j", "argmin")


def packet_length_sweep(buffer_bytes: int, sfs: Sequence[int] = phy.SPREADING_FACTORS,
                        bandwidth_hz: int = 125_000, header_bytes: int = 8,
                        budget: LinkBudget = phy.DEFAULT_BUDGET, ideal_link: bool = False,
                        lengths: Sequence[int] = range(20, 256)) -> List[tuple]:
    """(sf, length, joules, is_argmin) rows. The marker is the optimum over every
    feasible length, so it can sit below the first plotted length."""
    if buffer_bytes <= 0:
        raise ValueError("buffer size must be positive")
    config = scheduler.SchedulerConfig(radio=RadioParams(7, bandwidth_hz), mac_header_bytes=header_bytes)
    rows = []
    for sf in sfs:
        best = scheduler.optimal_packet_length(buffer_bytes, sf, config, budget, ideal_link)
        curve = scheduler.packet_energy_curve(buffer_bytes, sf, config, budget,
                                              [l for l in lengths if l > header_bytes], ideal_link)
        rows.extend((sf, length, energy, length == best) for length, energy in curve)
    return rows


def sweep_csv(rows: Iterable[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIG3_COLUMNS)
    for sf, length, energy, best in rows:
        w.writerow((sf, length, fmt(energy), int(best)))
    return buf.getvalue()


def sweep_argmins(rows: Iterable[tuple]) -> Dict[int, int]:
    return {sf: length for sf, length, _, best in rows if best}


# --- trace audits ----------------------------------------------------------------

TOL_MS = 1e-6


def duty_violations(trace: Iterable[TraceRecord], duty: Dict[int, float] = CHANNEL_DUTY) -> List[tuple]:
    """Transmissions that start before the previous one on the same transmitter and
    channel has been paid off. Returns (transmitter, channel, time, earliest allowed)."""
    last: Dict[Tuple[int, int], Tuple[float, float]] = {}
    bad = []
    for r in sorted(trace, key=lambda r: (r.device, r.channel, r.time_ms)):
        key = (r.device, r.channel)
        if key in last:
            start, dur = last[key]
            allowed = start + dur / duty[r.channel]
            if r.time_ms < allowed - TOL_MS:
                bad.append((r.device, r.channel, r.time_ms, allowed))
        last[key] = (r.time_ms, r.duration_ms)
    return bad


def same_sf_overlaps(trace: Iterable[TraceRecord], kinds=("data",)) -> List[tuple]:
    """Pairs of uplinks with the same SF on the same channel that overlap in time."""
    groups: Dict[Tuple[int, int], List[TraceRecord]] = {}
    for r in trace:
        if r.device != GATEWAY and r.kind in kinds:
            groups.setdefault((r.sf, r.channel), []).append(r)
    bad = []
    for recs in groups.values():
        recs.sort(key=lambda r: r.time_ms)
        reach, holder = -math.inf, None
        for r in recs:
            if r.time_ms < reach - TOL_MS:
                bad.append((holder, r))
            if r.time_ms + r.duration_ms > reach:
                reach, holder = r.time_ms + r.duration_ms, r
    return bad


def energy_from_power_log(power_log: Iterable[tuple], n_devices: int, tx_mw: float,
                          rx_mw: float) -> List[float]:
    """Per-device joules from (device, start ms, end ms, state) intervals."""
    watts = {"tx": tx_mw / 1000.0, "rx": rx_mw / 1000.0}
    parts: List[List[float]] = [[] for _ in range(n_devices)]
    for dev, start, end, state in power_log:
        parts[dev].append((end - start) / 1000.0 * watts[state])
    return [math.fsum(p) for p in parts]


def audit(trace: Sequence[TraceRecord]) -> dict:
    return {"records": len(trace), "duty_violations": duty_violations(trace),
            "same_sf_overlaps": same_sf_overlaps(trace)}
