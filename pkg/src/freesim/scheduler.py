"""Gateway-side allocation: spreading factor, slot, channel and power, then frame sizing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

from . import phy
from .phy import DEFAULT_BUDGET, EnergyProfile, LinkBudget, RadioParams, SPREADING_FACTORS

# sf -> (channels, tx power dBm). Channels 1-3 are the 1% uplink channels.
CHANNEL_POWER_PLAN: Dict[int, Tuple[Tuple[int, ...], int]] = {
    7: ((1,), 14),
    8: ((3,), 13),
    9: ((2,), 13),
    10: ((2,), 14),
    11: ((2, 3), 14),
    12: ((2, 3), 14),
}


def _ceil(x: float) -> int:
    # products like 100*T/T land a hair above an integer in binary floating point
    return math.ceil(round(x, 9))


@dataclass(frozen=True)
class SchedulerConfig:
    alpha: int = 0
    duty_cycle: float = 0.01
    mac_header_bytes: int = 8
    channels_per_sf: Mapping[int, int] = field(
        default_factory=lambda: {7: 1, 8: 1, 9: 1, 10: 1, 11: 2, 12: 2})
    max_packet_bytes: int = 255
    skew_rate: float = 15e-6
    energy_profile: EnergyProfile = EnergyProfile()
    radio: RadioParams = RadioParams(7, 125_000, 5)
    min_guard_ms: int = 1

    def __post_init__(self):
        if self.alpha not in (0, 1):
            raise ValueError("alpha must be 0 or 1")
        if not 0 < self.duty_cycle <= 1:
            raise ValueError("duty cycle must lie in (0, 1]")
        if any(m < 1 for m in self.channels_per_sf.values()):
            raise ValueError("every SF needs at least one channel")
        if not 0 < self.mac_header_bytes < self.max_packet_bytes <= 255:
            raise ValueError("header and packet sizes inconsistent")

    def __hash__(self):
        return hash((self.alpha, self.duty_cycle, self.mac_header_bytes,
                     tuple(sorted(self.channels_per_sf.items())), self.max_packet_bytes,
                     self.skew_rate, self.energy_profile, self.radio, self.min_guard_ms))

    def params(self, sf: int) -> RadioParams:
        return self.radio.with_sf(sf)

    @property
    def provisional_payload(self) -> int:
        return self.max_packet_bytes - self.mac_header_bytes

    @property
    def frame_factor(self) -> int:
        return _ceil(1 / self.duty_cycle)

    @property
    def tx_watts(self) -> float:
        return self.energy_profile.tx_power_draw_mw / 1000.0


@dataclass
class SchedulerState:
    counts: Dict[int, int] = field(default_factory=lambda: {sf: 0 for sf in SPREADING_FACTORS})
    members: Dict[int, List[int]] = field(default_factory=lambda: {sf: [] for sf in SPREADING_FACTORS})
    max_size: Dict[int, int] = field(default_factory=lambda: {sf: 0 for sf in SPREADING_FACTORS})


@dataclass(frozen=True)
class JoinInfo:
    device: int
    rssi_dbm: float
    data_size: int
    delay_elasticity: int = 0


@dataclass(frozen=True)
class Assignment:
    device: int
    sf: int
    slot_index: int
    tx_power_dbm: int
    channel_ids: Tuple[int, ...]


@dataclass(frozen=True)
class FrameStructure:
    sf: int
    packet_bytes: int
    payload_bytes: int
    toa_ms: float
    guard_ms: int
    slots_per_frame: int
    channel_ids: Tuple[int, ...]
    frames: int
    devices: int

    @property
    def slot_ms(self) -> float:
        return self.toa_ms + 2 * self.guard_ms

    @property
    def frame_ms(self) -> float:
        # uplink slots plus the downlink acknowledgement slot
        return (self.slots_per_frame + 1) * self.slot_ms

    def channel_offset_ms(self, k: int) -> float:
        return k * self.slot_ms

    @property
    def round_ms(self) -> float:
        return self.frames * self.frame_ms + (len(self.channel_ids) - 1) * self.slot_ms


class OutOfRange(ValueError):
    pass


def channel_power_plan(sf: int) -> Tuple[Tuple[int, ...], int]:
    if sf not in CHANNEL_POWER_PLAN:
        raise ValueError(f"spreading factor {sf} outside 7..12")
    return CHANNEL_POWER_PLAN[sf]


def min_spreading_factor(rssi_dbm: float, budget: LinkBudget = DEFAULT_BUDGET,
                         params: RadioParams = RadioParams(7)) -> int:
    for sf in SPREADING_FACTORS:
        if phy.receiver_sensitivity(params.with_sf(sf), budget) < rssi_dbm:
            return sf
    raise OutOfRange(f"rssi {rssi_dbm:.2f} dBm is below the SF12 sensitivity")


def _max_toa(sf: int, config: SchedulerConfig) -> float:
    return phy.time_on_air(config.params(sf), config.max_packet_bytes)


def cost_energy(sf: int, data_size: int, config: SchedulerConfig) -> float:
    packets = math.ceil(data_size / config.provisional_payload)
    return packets * _max_toa(sf, config) * config.tx_watts


def cost_time(sf: int, data_size: int, state: SchedulerState, config: SchedulerConfig) -> float:
    m = config.channels_per_sf[sf]
    frames = math.ceil(data_size / (config.provisional_payload * m))
    slots = max(state.counts[sf] + 1, config.frame_factor) * frames + (m - 1)
    return slots * _max_toa(sf, config)


def allocation_cost(sf: int, data_size: int, state: SchedulerState, config: SchedulerConfig) -> float:
    if config.alpha == 1:
        return cost_time(sf, data_size, state, config)
    return cost_energy(sf, data_size, config)


def allocate(join: JoinInfo, state: SchedulerState, config: SchedulerConfig,
             budget: LinkBudget = DEFAULT_BUDGET) -> Assignment:
    """Assign the cheapest feasible SF and the next free slot on it.

    Mutates ``state``. Raises OutOfRange when no SF can close the link.
    """
    lowest = min_spreading_factor(join.rssi_dbm, budget, config.radio)
    best_sf, best_cost = None, math.inf
    for sf in SPREADING_FACTORS:
        if sf < lowest:
            continue
        c = allocation_cost(sf, join.data_size, state, config)
        if c < best_cost:
            best_sf, best_cost = sf, c
    slot = state.counts[best_sf]
    state.counts[best_sf] += 1
    state.members[best_sf].append(join.device)
    state.max_size[best_sf] = max(state.max_size[best_sf], join.data_size)
    channels, power = channel_power_plan(best_sf)
    return Assignment(join.device, best_sf, slot, power, channels[:config.channels_per_sf[best_sf]])


def packet_energy_curve(max_size: int, sf: int, config: SchedulerConfig,
                        budget: LinkBudget = DEFAULT_BUDGET, lengths=None,
                        ideal_link: bool = False) -> List[Tuple[int, float]]:
    """(total packet bytes, joules) for draining ``max_size`` bytes at the SNR limit."""
    h = config.mac_header_bytes
    params = config.params(sf)
    snr = budget.snr_limit_db[sf]
    if lengths is None:
        lengths = range(h + 1, config.max_packet_bytes + 1)
    out = []
    for length in lengths:
        per = 0.0 if ideal_link else phy.per_at_snr(snr, params, length, budget)
        if per >= 1.0:
            out.append((length, math.inf))
            continue
        energy = phy.transmission_energy(max_size, length - h, params, per,
                                         config.energy_profile, header_bytes=h)
        out.append((length, energy))
    return out


def optimal_packet_length(max_size: int, sf: int, config: SchedulerConfig,
                          budget: LinkBudget = DEFAULT_BUDGET, ideal_link: bool = False) -> int:
    if max_size <= 0:
        raise ValueError("buffer size must be positive")
    lengths = range(5, config.max_packet_bytes + 1)
    curve = packet_energy_curve(max_size, sf, config, budget,
                                [l for l in lengths if l > config.mac_header_bytes], ideal_link)
    best_len, best = None, math.inf
    for length, energy in curve:
        if energy <= best:
            best_len, best = length, energy
    return best_len


def guard_ms(devices: int, packets: int, channels: int, toa_ms: float,
             config: SchedulerConfig) -> int:
    span = (max(devices, config.frame_factor) * packets + (channels - 1)) * toa_ms
    return max(config.min_guard_ms, _ceil(config.skew_rate * span))


def slots_per_frame(devices: int, toa_ms: float, guard: float, config: SchedulerConfig) -> int:
    minimum = _ceil((toa_ms / config.duty_cycle) / (toa_ms + 2 * guard))
    return max(devices, minimum)


def frame_structure(sf: int, state: SchedulerState, config: SchedulerConfig,
                    budget: LinkBudget = DEFAULT_BUDGET) -> FrameStructure:
    x = state.counts[sf]
    max_size = state.max_size[sf]
    m = config.channels_per_sf[sf]
    length = optimal_packet_length(max_size, sf, config, budget) if max_size > 0 else config.max_packet_bytes
    payload = length - config.mac_header_bytes
    toa = phy.time_on_air(config.params(sf), length)
    packets = math.ceil(max_size / (payload * m))
    g = guard_ms(x, packets, m, toa, config)
    s = slots_per_frame(x, toa, g, config)
    channels = channel_power_plan(sf)[0][:m]
    return FrameStructure(sf, length, payload, toa, g, s, channels, packets, x)


def guard_time(sf: int, state: SchedulerState, config: SchedulerConfig,
               budget: LinkBudget = DEFAULT_BUDGET) -> int:
    return frame_structure(sf, state, config, budget).guard_ms


def build_frame_structures(state: SchedulerState, config: SchedulerConfig,
                           budget: LinkBudget = DEFAULT_BUDGET) -> Dict[int, FrameStructure]:
    return {sf: frame_structure(sf, state, config, budget)
            for sf in SPREADING_FACTORS if state.counts[sf] > 0}
