"""Seeded discrete-event simulation of LoRaWAN bulk collection under four schemes.

Time is kept in milliseconds. The gateway is transmitter id -1. Channels 1-3
are the shared 1% channels; channel 4 is the 10% downlink channel.
"""
from __future__ import annotations

import heapq
import logging
import math
import random
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, NamedTuple, Optional, Tuple

from . import phy, protocol
from .phy import EnergyProfile, LinkBudget, PathLossModel, RadioParams, SPREADING_FACTORS
from .protocol import DeviceFsm, FSettings, GatewayFsm, device_step, gateway_step
from .scheduler import JoinInfo, SchedulerConfig, optimal_packet_length

log = logging.getLogger(__name__)

GATEWAY = -1
UPLINK_CHANNELS = (1, 2, 3)
DOWNLINK_CHANNEL = 4
CHANNEL_DUTY = {1: 0.01, 2: 0.01, 3: 0.01, 4: 0.10}
RX1_DELAY_MS = 1000.0
RX2_DELAY_MS = 2000.0
RX2_SF = 12
SECONDS_PER_YEAR = 365.25 * 86400
LIFETIME_CAP_YEARS = 50.0

# event priority classes for simultaneous events
P_END, P_RX, P_ACT, P_TIMER = 0, 1, 2, 3

SCHEMES = ("legacy", "delayed", "free")
TRACE_FIELDS = ("time_ms", "device", "sf", "channel", "power_dbm", "outcome", "duration_ms",
                "kind")


class TraceRecord(NamedTuple):
    """One radio transmission. Gateway downlinks use device -1 and outcome "sent"."""

    time_ms: float
    device: int
    sf: int
    channel: int
    power_dbm: float
    outcome: str
    duration_ms: float
    kind: str


def format_trace(records) -> str:
    lines = ["\t".join(TRACE_FIELDS)]
    for r in records:
        lines.append("\t".join(repr(v) if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> List[TraceRecord]:
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows or tuple(rows[0].split("\t")) != TRACE_FIELDS:
        raise ValueError("trace header missing or malformed")
    out = []
    for n, line in enumerate(rows[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(TRACE_FIELDS):
            raise ValueError(f"trace line {n}: expected {len(TRACE_FIELDS)} fields")
        t, dev, sf, ch, pw, outcome, dur, kind = parts
        out.append(TraceRecord(float(t), int(dev), int(sf), int(ch), float(pw), outcome,
                               float(dur), kind))
    return out
TRAFFIC = ("unconfirmed", "confirmed")


@dataclass
class ScenarioConfig:
    scheme: str
    seed: int = 0
    alpha: int = 0
    traffic: str = "unconfirmed"
    n_devices: int = 100
    period_h: float = 24.0
    bandwidth_hz: int = 500_000
    coding_rate: int = 5
    app_bytes: int = 20
    app_interval_s: float = 300.0
    battery_mah: float = 1000.0
    voltage_v: float = 3.3
    tx_mw: float = 132.0
    rx_mw: float = 48.0
    sleep_mw: float = 0.0
    tx_dbm: int = 14
    gateway_tx_dbm: int = 14
    rx2_bandwidth_hz: int = 125_000
    noise_figure_db: float = 6.0
    ebn0_scale: str = "db"
    shadowing_sigma_db: float = 2.0
    sf_margin_db: float = 10.0
    edge_margin_db: float = 16.0
    radius_m: float = 0.0
    max_attempts: int = 8
    max_concurrent: int = 8
    lorawan_header_bytes: int = 7
    free_header_bytes: int = 8
    ack_timeout_min_s: float = 1.0
    ack_timeout_max_s: float = 3.0
    join_backoff_min_s: float = 1.0
    join_backoff_max_s: float = 60.0
    stage1_s: float = 0.0
    stage1_s_per_device: float = 4.0
    stage2_s: float = 60.0
    coarse_sync_s: float = 0.5
    fine_sync_ms: float = 0.5
    skew_rate: float = 15e-6
    clock_errors: bool = True
    delayed_offset_max_ms: float = 600_000.0
    trace: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.traffic not in TRAFFIC:
            raise ValueError(f"traffic must be one of {TRAFFIC}, got {self.traffic!r}")
        if self.alpha not in (0, 1):
            raise ValueError("alpha must be 0 or 1")
        if self.n_devices < 1:
            raise ValueError("n_devices must be positive")
        if not 0 < self.period_h <= 48 * 7:
            raise ValueError("period_h must be positive")
        if self.max_attempts < 1 or self.max_concurrent < 1:
            raise ValueError("max_attempts and max_concurrent must be positive")
        if self.app_bytes < 1 or self.app_interval_s <= 0:
            raise ValueError("application model must be positive")
        if self.join_backoff_min_s > self.join_backoff_max_s:
            raise ValueError("join backoff bounds reversed")

    @property
    def confirmed(self) -> bool:
        return self.traffic == "confirmed"

    @property
    def label(self) -> str:
        return f"free-a{self.alpha}" if self.scheme == "free" else self.scheme


@dataclass
class MetricsReport:
    scheme: str
    traffic: str
    n_devices: int
    period_h: float
    seed: int
    ddr: float
    energy_j: float
    lifetime_y: float
    collection_s: float
    airtime_eff: Optional[float]
    transmissions: int
    data_transmissions: int
    collisions: int
    rejected: int
    lost: int
    noack: int
    ack_lost: int
    join_requests: int
    join_accepts: int
    join_rejections: int
    unjoined: int
    unsynced: int
    goal_bytes: int
    delivered_bytes: int
    dropped_bytes: int
    unsent_bytes: int
    span_s: float
    uplink_airtime_s: float
    sf_counts: Dict[int, int]
    per_device: List[dict] = field(default_factory=list, repr=False)
    trace: List[TraceRecord] = field(default_factory=list, repr=False)
    power_log: List[tuple] = field(default_factory=list, repr=False)

    @property
    def join_tx_per_device(self) -> float:
        return self.join_requests / self.n_devices

    def summary(self) -> dict:
        d = asdict(self)
        for k in ("per_device", "trace", "power_log"):
            d.pop(k)
        d["join_tx_per_device"] = self.join_tx_per_device
        return d


def lifetime_years(energy_per_device_j: float, span_s: float, profile: EnergyProfile) -> float:
    if span_s <= 0:
        raise ValueError("simulated span must be positive")
    if energy_per_device_j <= 0:
        return LIFETIME_CAP_YEARS
    watts = energy_per_device_j / span_s
    years = profile.battery_joules / watts / SECONDS_PER_YEAR
    return min(years, LIFETIME_CAP_YEARS)


class DutyCycle:
    """Per transmitter, per channel silence after each transmission."""

    def __init__(self, duty: Dict[int, float] = CHANNEL_DUTY):
        self.duty = dict(duty)
        self.next_ok: Dict[Tuple[int, int], float] = {}

    def allowed_at(self, transmitter: int, channel: int) -> float:
        return self.next_ok.get((transmitter, channel), -math.inf)

    def try_consume(self, transmitter: int, channel: int, duration_ms: float, now: float) -> bool:
        if duration_ms <= 0:
            raise ValueError("duration must be positive")
        if now < self.next_ok.get((transmitter, channel), -math.inf):
            return False
        # a send of length T is followed by (1/d - 1) T of silence
        self.next_ok[(transmitter, channel)] = now + duration_ms / self.duty[channel]
        return True


def gateway_admit(arrivals: List[Tuple[float, object]], capacity: int = 8) -> list:
    """Keep the earliest ``capacity`` of simultaneous arrivals (time, item)."""
    ordered = sorted(range(len(arrivals)), key=lambda i: (arrivals[i][0], i))
    return [arrivals[i][1] for i in ordered[:capacity]]


class _Tx:
    __slots__ = ("dev", "sf", "ch", "power", "rssi", "start", "end", "nbytes", "admitted",
                 "others", "on_done", "ctx", "outcome")

    def __init__(self, dev, sf, ch, power, rssi, start, end, nbytes, on_done, ctx):
        self.dev = dev
        self.sf = sf
        self.ch = ch
        self.power = power
        self.rssi = rssi
        self.start = start
        self.end = end
        self.nbytes = nbytes
        self.admitted = True
        self.others = []
        self.on_done = on_done
        self.ctx = ctx
        self.outcome = None


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.radio = RadioParams(7, cfg.bandwidth_hz, cfg.coding_rate)
        self.budget = LinkBudget(noise_figure_db=cfg.noise_figure_db, ebn0_scale=cfg.ebn0_scale)
        self.path = PathLossModel(shadowing_sigma_db=cfg.shadowing_sigma_db)
        self.profile = EnergyProfile(cfg.tx_mw, cfg.rx_mw, cfg.sleep_mw, cfg.battery_mah,
                                     cfg.voltage_v)
        self.params = {sf: self.radio.with_sf(sf) for sf in SPREADING_FACTORS}
        self.rx2 = RadioParams(RX2_SF, cfg.rx2_bandwidth_hz, cfg.coding_rate)
        self.sens = {p: phy.receiver_sensitivity(p, self.budget)
                     for p in list(self.params.values()) + [self.rx2]}
        self.noise = {p: phy.noise_floor_dbm(p.bandwidth_hz, self.budget) for p in self.sens}
        self.thr = [[0.0] * 13 for _ in range(13)]
        for a in SPREADING_FACTORS:
            for b in SPREADING_FACTORS:
                self.thr[a][b] = self.budget.threshold(a, b)

        s = cfg.seed
        self.rng_place = random.Random(f"{s}/placement")
        self.rng_traffic = random.Random(f"{s}/traffic")
        self.rng_radio = random.Random(f"{s}/radio")
        self.rng_mac = random.Random(f"{s}/mac")
        self.rng_clock = random.Random(f"{s}/clock")

        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self.duty = DutyCycle()
        self.gw_busy_until = -math.inf
        self.active: Dict[int, list] = {ch: [] for ch in UPLINK_CHANNELS}
        self.demod_in_use = 0

        n = cfg.n_devices
        self.radius = cfg.radius_m or self.default_radius()
        self.dist = []
        for _ in range(n):
            r = self.radius * math.sqrt(self.rng_place.random())
            self.rng_place.random()  # bearing, kept for reproducible layouts
            self.dist.append(max(r, 1.0))
        self.mean_loss = [self.path.mean_loss_db(d) for d in self.dist]
        self.arrivals = []
        period_s = cfg.period_h * 3600.0
        for _ in range(n):
            t, times = 0.0, []
            while True:
                t += self.rng_traffic.expovariate(1.0 / cfg.app_interval_s)
                if t >= period_s:
                    break
                times.append(t * 1000.0)
            self.arrivals.append(times)
        self.goal = [len(a) * cfg.app_bytes for a in self.arrivals]

        self.tx_ms = [0.0] * n
        self.rx_ms = [0.0] * n
        self.delivered = [0] * n
        self.dropped = [0] * n
        self.trace: List[tuple] = []
        self.power_log: List[tuple] = []
        self.counters = dict(transmissions=0, data_transmissions=0, collisions=0, rejected=0,
                             lost=0, noack=0, ack_lost=0, join_requests=0, join_accepts=0,
                             join_rejections=0)
        self.uplink_airtime_ms = 0.0
        self.last_activity = 0.0

    # --- setup helpers -----------------------------------------------------

    def default_radius(self) -> float:
        """Disk radius whose edge still reaches SF12 sensitivity with the edge margin."""
        loss = self.cfg.tx_dbm - (self.sens[self.params[12]] + self.cfg.edge_margin_db)
        return self.path.distance_for_loss(loss)

    def link_sf(self, dev: int) -> int:
        """Lowest SF the device's average link supports with the configured margin."""
        rssi = self.cfg.tx_dbm - self.mean_loss[dev] - self.cfg.sf_margin_db
        for sf in SPREADING_FACTORS:
            if self.sens[self.params[sf]] < rssi:
                return sf
        return 12

    # --- event kernel ------------------------------------------------------

    def at(self, t: float, prio: int, fn, *args):
        self._seq += 1
        heapq.heappush(self._heap, (t, prio, self._seq, fn, args))

    def run_events(self):
        heap = self._heap
        pop = heapq.heappop
        while heap:
            t, _, _, fn, args = pop(heap)
            self.now = t
            fn(*args)

    # --- energy ------------------------------------------------------------

    def spend(self, dev: int, start: float, dur: float, state: str):
        if dur <= 0:
            return
        if state == "tx":
            self.tx_ms[dev] += dur
        else:
            self.rx_ms[dev] += dur
        if self.cfg.trace:
            self.power_log.append((dev, start, start + dur, state))

    # --- radio -------------------------------------------------------------

    def sample_rssi(self, tx_dbm: float, dev: int) -> float:
        sigma = self.path.shadowing_sigma_db
        shadow = self.rng_radio.gauss(0.0, sigma) if sigma > 0 else 0.0
        return tx_dbm - self.mean_loss[dev] - shadow

    def decodes(self, rssi: float, params: RadioParams, nbytes: int) -> bool:
        if rssi < self.sens[params]:
            return False
        per = phy.per_at_snr(rssi - self.noise[params], params, nbytes, self.budget)
        return per <= 0.0 or self.rng_radio.random() >= per

    def uplink(self, dev: int, sf: int, ch: int, power: float, nbytes: int, on_done, ctx=None,
               kind: str = "data") -> _Tx:
        now = self.now
        toa = phy.time_on_air(self.params[sf], nbytes)
        if not self.duty.try_consume(dev, ch, toa, now):
            raise RuntimeError(f"device {dev} violated the duty cycle on channel {ch}")
        rec = _Tx(dev, sf, ch, power, self.sample_rssi(power, dev), now, now + toa, nbytes,
                  on_done, ctx)
        for other in self.active[ch]:
            other.others.append(rec)
            rec.others.append(other)
        if self.demod_in_use >= self.cfg.max_concurrent:
            rec.admitted = False
        else:
            self.demod_in_use += 1
        self.active[ch].append(rec)
        self.spend(dev, now, toa, "tx")
        self.counters["transmissions"] += 1
        if kind == "join":
            self.counters["join_requests"] += 1
        else:
            self.counters["data_transmissions"] += 1
        self.uplink_airtime_ms += toa
        self.at(now + toa, P_END, self._uplink_end, rec, kind)
        return rec

    def _uplink_end(self, rec: _Tx, kind: str):
        self.active[rec.ch].remove(rec)
        if rec.admitted:
            self.demod_in_use -= 1
            outcome = "ok"
            thr = self.thr[rec.sf]
            for o in rec.others:
                if rec.rssi - o.rssi < thr[o.sf]:
                    outcome = "collision"
                    break
            if outcome == "ok" and not self.decodes(rec.rssi, self.params[rec.sf], rec.nbytes):
                outcome = "lost"
        else:
            outcome = "rejected"
        rec.outcome = outcome
        if outcome == "collision":
            self.counters["collisions"] += 1
        elif outcome == "rejected":
            self.counters["rejected"] += 1
        elif outcome == "lost":
            self.counters["lost"] += 1
        if self.cfg.trace:
            self.trace.append(TraceRecord(rec.start, rec.dev, rec.sf, rec.ch, float(rec.power),
                                          outcome, rec.end - rec.start, kind))
        self.last_activity = max(self.last_activity, rec.end)
        rec.on_done(rec)

    def downlink(self, params: RadioParams, ch: int, nbytes: int, kind: str) -> Tuple[str, float]:
        """Gateway sends now if its radio and duty cycle allow. Returns (status, airtime)."""
        toa = phy.time_on_air(params, nbytes)
        now = self.now
        if now < self.gw_busy_until or not self.duty.try_consume(GATEWAY, ch, toa, now):
            return "blocked", toa
        self.gw_busy_until = now + toa
        self.last_activity = max(self.last_activity, now + toa)
        if self.cfg.trace:
            self.trace.append(TraceRecord(now, GATEWAY, params.sf, ch,
                                          float(self.cfg.gateway_tx_dbm), "sent", toa, kind))
        return "sent", toa

    def device_hears(self, dev: int, params: RadioParams, nbytes: int) -> bool:
        return self.decodes(self.sample_rssi(self.cfg.gateway_tx_dbm, dev), params, nbytes)

    def window(self, rec: _Tx, number: int) -> Tuple[RadioParams, int]:
        """Radio settings and channel of receive window 1 or 2 after an uplink."""
        if number == 1:
            return self.params[rec.sf], rec.ch
        return self.rx2, DOWNLINK_CHANNEL

    # --- results -------------------------------------------------------------

    def finish(self, collection_end: float, airtime_eff: Optional[float], extra: dict) -> MetricsReport:
        cfg = self.cfg
        n = cfg.n_devices
        tx_w = self.profile.tx_power_draw_mw / 1000.0
        rx_w = self.profile.rx_power_draw_mw / 1000.0
        sleep_w = self.profile.sleep_power_draw_mw / 1000.0
        period_ms = cfg.period_h * 3600_000.0
        span_ms = max(period_ms, collection_end)
        energies = []
        per_device = []
        for d in range(n):
            awake = self.tx_ms[d] + self.rx_ms[d]
            e = (self.tx_ms[d] * tx_w + self.rx_ms[d] * rx_w
                 + max(span_ms - awake, 0.0) * sleep_w) / 1000.0
            energies.append(e)
            unsent = self.goal[d] - self.delivered[d] - self.dropped[d]
            per_device.append(dict(device=d, goal=self.goal[d], delivered=self.delivered[d],
                                   dropped=self.dropped[d], unsent=unsent, energy_j=e,
                                   tx_ms=self.tx_ms[d], rx_ms=self.rx_ms[d],
                                   distance_m=self.dist[d]))
        total_e = sum(energies)
        goal = sum(self.goal)
        delivered = sum(self.delivered)
        c = self.counters
        return MetricsReport(
            scheme=cfg.label, traffic=cfg.traffic, n_devices=n, period_h=cfg.period_h,
            seed=cfg.seed, ddr=delivered / goal if goal else 1.0, energy_j=total_e,
            lifetime_y=lifetime_years(total_e / n, span_ms / 1000.0, self.profile),
            collection_s=collection_end / 1000.0, airtime_eff=airtime_eff,
            transmissions=c["transmissions"], data_transmissions=c["data_transmissions"],
            collisions=c["collisions"], rejected=c["rejected"], lost=c["lost"],
            noack=c["noack"], ack_lost=c["ack_lost"], join_requests=c["join_requests"],
            join_accepts=c["join_accepts"], join_rejections=c["join_rejections"],
            unjoined=extra.get("unjoined", 0), unsynced=extra.get("unsynced", 0),
            goal_bytes=goal, delivered_bytes=delivered, dropped_bytes=sum(self.dropped),
            unsent_bytes=goal - delivered - sum(self.dropped), span_s=span_ms / 1000.0,
            uplink_airtime_s=self.uplink_airtime_ms / 1000.0,
            sf_counts=extra.get("sf_counts", {}), per_device=per_device,
            trace=self.trace, power_log=self.power_log)


class AlohaSimulation(Simulation):
    """Class-A devices sending on their own: legacy (per reading) or delayed (bulk)."""

    def __init__(self, cfg: ScenarioConfig):
        super().__init__(cfg)
        n = cfg.n_devices
        self.h = cfg.lorawan_header_bytes
        self.sf = [self.link_sf(d) for d in range(n)]
        self.queue = [deque() for _ in range(n)]
        self.busy = [False] * n
        self.attempts = [0] * n
        self.gw_received = set()
        self.rx2_listen = phy.preamble_ms(self.rx2)

    def run(self) -> MetricsReport:
        cfg = self.cfg
        n = cfg.n_devices
        if cfg.scheme == "legacy":
            for d in range(n):
                if self.arrivals[d]:
                    self.at(self.arrivals[d][0], P_ACT, self._arrive, d, 0)
        else:
            sched = SchedulerConfig(mac_header_bytes=self.h, energy_profile=self.profile,
                                    radio=self.radio)
            for d in range(n):
                if not self.goal[d]:
                    continue
                length = optimal_packet_length(self.goal[d], self.sf[d], sched, self.budget)
                payload = length - self.h
                left, pkt = self.goal[d], 0
                while left > 0:
                    self.queue[d].append((pkt, min(payload, left)))
                    left -= payload
                    pkt += 1
                start = self.rng_mac.uniform(0.0, cfg.delayed_offset_max_ms)
                self.at(start, P_ACT, self._try_send, d)
        self.run_events()
        counts = {sf: self.sf.count(sf) for sf in SPREADING_FACTORS}
        return self.finish(self.last_activity, None, {"sf_counts": counts})

    def _arrive(self, d: int, k: int):
        self.queue[d].append((k, self.cfg.app_bytes))
        if k + 1 < len(self.arrivals[d]):
            self.at(self.arrivals[d][k + 1], P_ACT, self._arrive, d, k + 1)
        if not self.busy[d]:
            self._try_send(d)

    def _try_send(self, d: int):
        if not self.queue[d]:
            self.busy[d] = False
            return
        self.busy[d] = True
        now = self.now
        duty = self.duty
        free = [ch for ch in UPLINK_CHANNELS if duty.allowed_at(d, ch) <= now]
        if not free:
            wait = min(duty.allowed_at(d, ch) for ch in UPLINK_CHANNELS)
            self.at(wait, P_ACT, self._try_send, d)
            return
        ch = free[self.rng_mac.randrange(len(free))] if len(free) > 1 else free[0]
        pkt, size = self.queue[d][0]
        self.attempts[d] += 1
        self.uplink(d, self.sf[d], ch, self.cfg.tx_dbm, size + self.h, self._sent, (pkt, size))

    def _sent(self, rec: _Tx):
        d = rec.dev
        pkt, size = rec.ctx
        got = rec.outcome == "ok"
        if got and (d, pkt) not in self.gw_received:
            self.gw_received.add((d, pkt))
            if not self.cfg.confirmed:
                self.delivered[d] += size
        if not self.cfg.confirmed:
            if not got:
                self.dropped[d] += size
            self.queue[d].popleft()
            self.attempts[d] = 0
            # both receive windows open and time out empty
            self.spend(d, rec.end + RX1_DELAY_MS, phy.preamble_ms(self.params[rec.sf]), "rx")
            self.spend(d, rec.end + RX2_DELAY_MS, self.rx2_listen, "rx")
            self.at(rec.end + RX2_DELAY_MS + self.rx2_listen, P_ACT, self._try_send, d)
            return
        self.at(rec.end + RX1_DELAY_MS, P_RX, self._rx1, rec, got)

    def _ack(self, d: int, params: RadioParams, ch: int) -> Optional[bool]:
        """Gateway tries an ACK now; None when it cannot transmit."""
        status, toa = self.downlink(params, ch, self.h, "ack")
        if status == "blocked":
            return None
        self.spend(d, self.now, toa, "rx")
        ok = self.device_hears(d, params, self.h)
        if not ok:
            self.counters["ack_lost"] += 1
        return ok

    def _rx1(self, rec: _Tx, got: bool):
        d = rec.dev
        params, ch = self.window(rec, 1)
        result = self._ack(d, params, ch) if got else None
        if result is None:
            self.spend(d, self.now, phy.preamble_ms(params), "rx")
            self.at(rec.end + RX2_DELAY_MS, P_RX, self._rx2, rec, got)
        else:
            self._resolve(rec, result, self.now + phy.time_on_air(params, self.h))

    def _rx2(self, rec: _Tx, got: bool):
        d = rec.dev
        params, ch = self.window(rec, 2)
        result = self._ack(d, params, ch) if got else None
        if result is None:
            if got:
                self.counters["noack"] += 1
            self.spend(d, self.now, self.rx2_listen, "rx")
            self._resolve(rec, False, self.now + self.rx2_listen)
        else:
            self._resolve(rec, result, self.now + phy.time_on_air(params, self.h))

    def _resolve(self, rec: _Tx, acked: bool, t_free: float):
        d = rec.dev
        pkt, size = rec.ctx
        if acked:
            self.delivered[d] += size
        elif self.attempts[d] >= self.cfg.max_attempts:
            self.dropped[d] += size
        else:
            backoff = self.rng_mac.uniform(self.cfg.ack_timeout_min_s, self.cfg.ack_timeout_max_s)
            self.at(t_free + backoff * 1000.0, P_ACT, self._try_send, d)
            return
        self.queue[d].popleft()
        self.attempts[d] = 0
        self.at(t_free, P_ACT, self._try_send, d)


class FreeSimulation(Simulation):
    """Join and synchronize, then collect in per-SF slotted frames."""

    def __init__(self, cfg: ScenarioConfig):
        super().__init__(cfg)
        n = cfg.n_devices
        self.h = cfg.free_header_bytes
        self.sched = SchedulerConfig(alpha=cfg.alpha, mac_header_bytes=self.h,
                                     skew_rate=cfg.skew_rate, energy_profile=self.profile,
                                     radio=self.radio)
        self.gw = GatewayFsm(self.sched, self.budget, cfg.sf_margin_db)
        self.dev = [DeviceFsm(d, cfg.confirmed, cfg.max_attempts) for d in range(n)]
        self.join_sf = [self.link_sf(d) for d in range(n)]
        self.join_bytes = protocol.JOIN_REQUEST_LEN + protocol.JOIN_FRAMING_BYTES
        self.accept_bytes = protocol.JOIN_ACCEPT_LEN + protocol.JOIN_FRAMING_BYTES
        self.fsettings_bytes = protocol.FSETTINGS_LEN + protocol.JOIN_FRAMING_BYTES
        # clock error e(t) = offset + skew * (t - synced_at); device clock reads t + e(t)
        self.skew = [self.rng_clock.uniform(-cfg.skew_rate, cfg.skew_rate) if cfg.clock_errors
                     else 0.0 for _ in range(n)]
        self.offset = [0.0] * n
        self.synced_at = [0.0] * n
        self.listen_from: Dict[int, float] = {}
        self.stage1_ms = float(round(1000.0 * (cfg.stage1_s or max(600.0, cfg.stage1_s_per_device * n))))
        self.stage2_end_ms = self.stage1_ms + float(round(1000.0 * cfg.stage2_s))
        self.pending_accept: Dict[int, object] = {}
        self.frame_sent: Dict[int, Dict[int, Dict[int, int]]] = {}  # device -> frame -> bit -> pkt
        self.bitmaps: Dict[Tuple[int, int], tuple] = {}
        self.idle_frames = {sf: 0 for sf in SPREADING_FACTORS}
        self.gw_received = set()
        self.payload_of: List[Dict[int, int]] = [dict() for _ in range(n)]
        self.round_airtime_ms = 0.0
        self.round_end_ms = self.stage2_end_ms

    def clock_error(self, d: int, t: float) -> float:
        return self.offset[d] + self.skew[d] * (t - self.synced_at[d])

    def drift_ms(self, d: int, t: float) -> float:
        """Slot timing error at true time t. Slots are counted down from the last sync on
        the device's own clock, so the offset cancels and only skew since then remains."""
        return self.skew[d] * (t - self.synced_at[d])

    def resync(self, d: int, t: float, accuracy_ms: float):
        if self.cfg.clock_errors:
            self.offset[d] = self.rng_clock.uniform(-accuracy_ms, accuracy_ms)
        self.synced_at[d] = t

    def local_to_true(self, d: int, local: float) -> float:
        return local - self.clock_error(d, local)

    def run(self) -> MetricsReport:
        cfg = self.cfg
        for d in range(cfg.n_devices):
            start = self.rng_mac.uniform(0.0, cfg.join_backoff_max_s * 1000.0)
            self.at(start, P_ACT, self._power_on, d)
        self.at(self.stage1_ms, P_TIMER, self._stage1_end)
        self.run_events()
        unjoined = sum(1 for f in self.dev if f.assignment is None)
        unsynced = sum(1 for f in self.dev if f.assignment is not None and f.frame is None)
        counts = {sf: self.gw.state.counts[sf] for sf in SPREADING_FACTORS}
        span = self.round_end_ms - self.stage2_end_ms
        eff = (self.round_airtime_ms / 8.0) / span if span > 0 else 0.0
        return self.finish(max(self.round_end_ms, self.last_activity), eff,
                           {"unjoined": unjoined, "unsynced": unsynced, "sf_counts": counts})

    # --- stage 1: joining ---------------------------------------------------

    def _power_on(self, d: int):
        fsm, actions = device_step(self.dev[d], ("power_on",))
        self._device_actions(d, actions)

    def _device_actions(self, d: int, actions):
        for act in actions:
            if act[0] == "send_join":
                self._send_join(d)
            elif act[0] == "backoff_then_send_join":
                wait = self.rng_mac.uniform(self.cfg.join_backoff_min_s, self.cfg.join_backoff_max_s)
                self.at(self.now + wait * 1000.0, P_ACT, self._send_join, d)
            elif act[0] == "sleep_until":
                pass

    def _send_join(self, d: int):
        if self.now >= self.stage1_ms:
            return
        ch = UPLINK_CHANNELS[self.rng_mac.randrange(3)]
        ok_at = self.duty.allowed_at(d, ch)
        if ok_at > self.now:
            self.at(ok_at, P_ACT, self._send_join_on, d, ch)
        else:
            self._send_join_on(d, ch)

    def _send_join_on(self, d: int, ch: int):
        if self.now >= self.stage1_ms:
            return
        self.uplink(d, self.join_sf[d], ch, self.cfg.tx_dbm, self.join_bytes, self._join_sent,
                    kind="join")

    def _join_sent(self, rec: _Tx):
        d = rec.dev
        if rec.outcome == "ok" and self.gw.phase == protocol.STAGE1:
            _, actions = gateway_step(self.gw, ("join_request",
                                               JoinInfo(d, rec.rssi, self.goal[d], 0)))
            for act in actions:
                if act[0] == "send_accept":
                    self.pending_accept[d] = act[1]
                elif act[0] == "reject":
                    self.counters["join_rejections"] += 1
        self.at(rec.end + RX1_DELAY_MS, P_RX, self._join_rx, rec, 1)

    def _join_rx(self, rec: _Tx, window: int):
        d = rec.dev
        params, ch = self.window(rec, window)
        heard = False
        a = self.pending_accept.get(d)
        status, toa = ("blocked", 0.0)
        if a is not None and self.now < self.stage1_ms:
            status, toa = self.downlink(params, ch, self.accept_bytes, "join_accept")
        if status == "sent":
            del self.pending_accept[d]
            self.spend(d, self.now, toa, "rx")
            heard = self.device_hears(d, params, self.accept_bytes)
            if heard:
                self.counters["join_accepts"] += 1
                stage2_in = self.stage1_ms - (self.now + toa)
                self.resync(d, self.now + toa, self.cfg.coarse_sync_s * 1000.0)
                _, actions = device_step(self.dev[d], ("join_accept", a, self.stage1_ms))
                self._check_accept_codec(a, stage2_in)
                self.listen_from[d] = self.local_to_true(d, self.stage1_ms)
                return
            self.counters["ack_lost"] += 1
        else:
            self.spend(d, self.now, phy.preamble_ms(params), "rx")
        if window == 1:
            self.at(rec.end + RX2_DELAY_MS, P_RX, self._join_rx, rec, 2)
            return
        if a is not None and status == "blocked":
            self.counters["noack"] += 1
            self.pending_accept.pop(d, None)
        _, actions = device_step(self.dev[d], ("join_windows_closed",))
        self._device_actions(d, actions)

    def _check_accept_codec(self, a, stage2_in_ms: float):
        dc = protocol.DCSettings.from_assignment(a, min(0xFFFF, max(0, int(stage2_in_ms // 1000))))
        msg = protocol.JoinAccept(0, 0, a.device, 0, dc)
        assert protocol.decode_join_accept(protocol.encode_join_accept(msg)) == msg

    # --- stage 2: frame dissemination ---------------------------------------

    def _stage1_end(self):
        self.pending_accept.clear()
        _, actions = gateway_step(self.gw, ("stage1_end",))
        self.frames = actions[0][1]
        self._next_broadcast(self.now)
        self.at(self.stage2_end_ms, P_TIMER, self._stage2_end)

    def _next_broadcast(self, t: float):
        # end each broadcast on a whole millisecond so the countdown it carries is exact
        toa = phy.time_on_air(self.params[12], self.fsettings_bytes)
        start = math.ceil(t + toa) - toa
        if start + toa <= self.stage2_end_ms:
            self.at(start, P_TIMER, self._broadcast)

    def _broadcast(self):
        toa = phy.time_on_air(self.params[12], self.fsettings_bytes)
        status, _ = self.downlink(self.params[12], DOWNLINK_CHANNEL, self.fsettings_bytes,
                                  "fsettings")
        if status == "sent":
            end = self.now + toa
            settings = FSettings.from_frames(self.frames, int(round(self.stage2_end_ms - end)),
                                             int(self.cfg.period_h * 3600))
            wire = protocol.encode_fsettings(settings)
            settings = protocol.decode_fsettings(wire)
            for d, since in list(self.listen_from.items()):
                if since > self.now:
                    continue
                if self.device_hears(d, self.params[12], self.fsettings_bytes):
                    self.spend(d, since, end - since, "rx")
                    del self.listen_from[d]
                    self.resync(d, end, self.cfg.fine_sync_ms)
                    local_end = end + self.clock_error(d, end)
                    self._load_device(d, settings)
                    device_step(self.dev[d], ("fsettings", settings, local_end, self.radio,
                                              self.h))
                    if self.dev[d].phase == protocol.SCHEDULED:
                        self.frame_sent[d] = {}
                        self._schedule_slot(d, 0, 0)
        nxt = max(self.gw_busy_until, self.duty.allowed_at(GATEWAY, DOWNLINK_CHANNEL), self.now)
        self._next_broadcast(nxt)

    def _stage2_end(self):
        for d, since in self.listen_from.items():
            self.spend(d, since, self.stage2_end_ms - since, "rx")
        self.listen_from.clear()
        gateway_step(self.gw, ("stage2_end",))
        if self.cfg.confirmed:
            for sf, frame in self.frames.items():
                self._schedule_frame_end(sf, 0)

    # --- collection rounds ----------------------------------------------------

    def _load_device(self, d: int, settings: FSettings):
        fsm = self.dev[d]
        payload = settings.pckt_sizes[fsm.assignment.sf - 7] - self.h
        left, sizes = self.goal[d], []
        while left > 0:
            sizes.append(min(payload, left))
            left -= payload
        fsm.load(sizes)
        self.payload_of[d] = dict(enumerate(sizes))

    def _schedule_slot(self, d: int, frame_index: int, k: int):
        fsm = self.dev[d]
        local = protocol.slot_time_ms(fsm.frame, fsm.round_start_ms, frame_index, k,
                                      fsm.assignment.slot_index) + fsm.frame.guard_ms
        self.at(self.local_to_true(d, local), P_ACT, self._slot, d, frame_index, k)

    def _slot(self, d: int, frame_index: int, k: int):
        fsm = self.dev[d]
        if fsm.phase != protocol.SCHEDULED:
            return
        _, actions = device_step(fsm, ("slot", k, frame_index))
        sf = fsm.assignment.sf
        frame = fsm.frame
        for _, pkt, size, ch in actions:
            bit = k * frame.slots_per_frame + fsm.assignment.slot_index
            rec = self.uplink(d, sf, ch, fsm.assignment.tx_power_dbm, size + self.h,
                              self._data_sent, (frame_index, bit, pkt, size))
            self.round_airtime_ms += rec.end - rec.start
            if self.cfg.confirmed:
                sent = self.frame_sent[d].setdefault(frame_index, {})
                if not sent:
                    ack_end = (protocol.ack_slot_time_ms(frame, fsm.round_start_ms, frame_index)
                               + frame.slot_ms)
                    self.at(self.local_to_true(d, ack_end), P_RX, self._read_bitmap, d,
                            frame_index)
                sent[bit] = pkt
        if fsm.phase != protocol.SCHEDULED:
            return
        if k + 1 < len(fsm.assignment.channel_ids):
            self._schedule_slot(d, frame_index, k + 1)
        else:
            self._schedule_slot(d, frame_index + 1, 0)

    def _data_sent(self, rec: _Tx):
        d = rec.dev
        frame_index, bit, pkt, size = rec.ctx
        sf = self.dev[d].assignment.sf
        self.round_end_ms = max(self.round_end_ms, rec.end)
        if rec.outcome != "ok":
            if not self.cfg.confirmed:
                self.dropped[d] += size
            return
        gateway_step(self.gw, ("uplink", sf, frame_index, bit, d, pkt))
        if not self.cfg.confirmed:
            self.delivered[d] += size

    def _schedule_frame_end(self, sf: int, frame_index: int):
        frame = self.frames[sf]
        t = protocol.ack_slot_time_ms(frame, self.stage2_end_ms, frame_index)
        self.at(t, P_RX, self._frame_end, sf, frame_index)

    def _frame_end(self, sf: int, frame_index: int):
        frame = self.frames[sf]
        heard = (sf, frame_index) in self.gw.frame_rx
        _, actions = gateway_step(self.gw, ("frame_end", sf, frame_index))
        if heard:
            self.idle_frames[sf] = 0
            # the bitmap may go anywhere in the downlink slot, short of its trailing guard
            deadline = self.now + frame.slot_ms - frame.guard_ms
            self._send_bitmap(sf, frame_index, actions[0][2], deadline)
        else:
            self.idle_frames[sf] += 1
        # two silent frames in a row mean every device of this SF is finished
        if frame_index + 1 < frame.frames or self.idle_frames[sf] < 2:
            self._schedule_frame_end(sf, frame_index + 1)

    def _send_bitmap(self, sf: int, frame_index: int, bitmap, deadline: float):
        nbytes = self.h + len(bitmap.bits)
        params = self.params[sf]
        toa = phy.time_on_air(params, nbytes)
        if self.now + toa <= deadline:
            status, _ = self.downlink(params, DOWNLINK_CHANNEL, nbytes, "bitmap")
            if status == "sent":
                self.bitmaps[(sf, frame_index)] = (bitmap, self.now + toa, nbytes)
                self.round_end_ms = max(self.round_end_ms, self.now + toa)
                return
            retry = max(self.gw_busy_until, self.duty.allowed_at(GATEWAY, DOWNLINK_CHANNEL))
            if retry + toa <= deadline:
                self.at(retry, P_RX, self._send_bitmap, sf, frame_index, bitmap, deadline)
                return
        self.counters["noack"] += 1

    def _read_bitmap(self, d: int, frame_index: int):
        fsm = self.dev[d]
        sf = fsm.assignment.sf
        frame = self.frames[sf]
        slot_start = protocol.ack_slot_time_ms(frame, self.stage2_end_ms, frame_index)
        sent = self.frame_sent[d].pop(frame_index)
        got = self.bitmaps.get((sf, frame_index))
        acked_pkts = None
        if got is None:
            self.spend(d, slot_start, frame.slot_ms, "rx")
        else:
            bitmap, end, nbytes = got
            self.spend(d, slot_start, end - slot_start, "rx")
            if self.device_hears(d, self.params[sf], nbytes):
                acked_pkts = {pkt for bit, pkt in sent.items() if protocol.acked(bitmap, bit)}
            else:
                self.counters["ack_lost"] += 1
        delivered, dropped = len(fsm.delivered), len(fsm.dropped)
        device_step(fsm, ("bitmap", frame_index, acked_pkts))
        for pkt in fsm.delivered[delivered:]:
            self.delivered[d] += self.payload_of[d][pkt]
        for pkt in fsm.dropped[dropped:]:
            self.dropped[d] += self.payload_of[d][pkt]


def run_scenario(cfg: ScenarioConfig) -> MetricsReport:
    sim = FreeSimulation(cfg) if cfg.scheme == "free" else AlohaSimulation(cfg)
    return sim.run()
