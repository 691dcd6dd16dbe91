"""LoRa link-layer models: airtime, error rates, sensitivity, path loss, capture."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

SPREADING_FACTORS = (7, 8, 9, 10, 11, 12)

SNR_LIMIT_DB = {7: -6.0, 8: -9.0, 9: -12.0, 10: -15.0, 11: -17.5, 12: -20.0}

# row: victim SF, column: interferer SF, both ordered 7..12
INTERFERENCE_DB = (
    (1, -8, -9, -9, -9, -9),
    (-11, 1, -11, -12, -13, -13),
    (-15, -13, 1, -13, -14, -15),
    (-19, -18, -17, 1, -17, -18),
    (-22, -22, -21, -20, 1, -20),
    (-25, -25, -25, -24, -23, 1),
)

THERMAL_NOISE_DBM_HZ = -174.0


@dataclass(frozen=True)
class RadioParams:
    """Modulation settings. ``coding_rate`` is the denominator x of 4/x."""

    sf: int
    bandwidth_hz: int = 125_000
    coding_rate: int = 5
    preamble_symbols: int = 8
    explicit_header: bool = True
    crc_on: bool = True

    def __post_init__(self):
        if self.sf not in SPREADING_FACTORS:
            raise ValueError(f"spreading factor {self.sf} outside 7..12")
        if self.coding_rate not in (5, 6, 7, 8):
            raise ValueError(f"coding rate 4/{self.coding_rate} not supported")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if self.preamble_symbols <= 0:
            raise ValueError("preamble length must be positive")
        # hashed on every airtime lookup, so compute once
        object.__setattr__(self, "_hash", hash((self.sf, self.bandwidth_hz, self.coding_rate,
                                                self.preamble_symbols, self.explicit_header,
                                                self.crc_on)))

    def __hash__(self):
        return self._hash

    @property
    def symbol_ms(self) -> float:
        return (2 ** self.sf) / self.bandwidth_hz * 1000.0

    @property
    def low_data_rate_optimize(self) -> bool:
        return self.symbol_ms > 16.0

    def with_sf(self, sf: int) -> "RadioParams":
        return RadioParams(sf, self.bandwidth_hz, self.coding_rate,
                           self.preamble_symbols, self.explicit_header, self.crc_on)


@dataclass(frozen=True)
class LinkBudget:
    snr_limit_db: Mapping[int, float] = field(default_factory=lambda: dict(SNR_LIMIT_DB))
    noise_figure_db: float = 6.0
    interference_db: Sequence[Sequence[float]] = INTERFERENCE_DB
    # how Eb/N0 enters the Q-function argument inside the link model: the raw "db"
    # figure keeps PER small at the demodulation limit; "linear" follows the textbook form
    ebn0_scale: str = "db"

    def __post_init__(self):
        if self.ebn0_scale not in ("linear", "db"):
            raise ValueError("ebn0_scale must be 'linear' or 'db'")

    def threshold(self, victim_sf: int, interferer_sf: int) -> float:
        return self.interference_db[victim_sf - 7][interferer_sf - 7]

    def __hash__(self):
        return hash((tuple(sorted(self.snr_limit_db.items())), self.noise_figure_db,
                     tuple(map(tuple, self.interference_db)), self.ebn0_scale))


@dataclass(frozen=True)
class PathLossModel:
    ref_loss_db: float = 127.41
    ref_distance_m: float = 40.0
    exponent: float = 2.08
    shadowing_sigma_db: float = 2.0

    def __post_init__(self):
        if self.exponent <= 0:
            raise ValueError("path loss exponent must be positive")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing sigma must be non-negative")

    def mean_loss_db(self, distance_m: float) -> float:
        if distance_m <= 0:
            raise ValueError("distance must be positive")
        return self.ref_loss_db + 10 * self.exponent * math.log10(distance_m / self.ref_distance_m)

    def distance_for_loss(self, loss_db: float) -> float:
        return self.ref_distance_m * 10 ** ((loss_db - self.ref_loss_db) / (10 * self.exponent))


@dataclass(frozen=True)
class EnergyProfile:
    tx_power_draw_mw: float = 132.0
    rx_power_draw_mw: float = 48.0
    sleep_power_draw_mw: float = 0.0
    battery_mah: float = 1000.0
    nominal_voltage_v: float = 3.3

    def __post_init__(self):
        for name in ("tx_power_draw_mw", "rx_power_draw_mw", "sleep_power_draw_mw"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def battery_joules(self) -> float:
        return self.battery_mah / 1000.0 * self.nominal_voltage_v * 3600.0


DEFAULT_BUDGET = LinkBudget()


@lru_cache(maxsize=None)
def time_on_air(params: RadioParams, total_packet_bytes: int) -> float:
    """Airtime in ms of a packet of ``total_packet_bytes`` (header included)."""
    if not 0 < total_packet_bytes <= 255:
        raise ValueError(f"packet length {total_packet_bytes} outside 1..255")
    sf = params.sf
    t_sym = params.symbol_ms
    ldro = 1 if params.low_data_rate_optimize else 0
    num = (8 * total_packet_bytes - 4 * sf + 28 + 16 * int(params.crc_on)
           - 20 * (1 - int(params.explicit_header)))
    blocks = math.ceil(num / (4 * (sf - 2 * ldro)))
    payload_symbols = 8 + max(blocks * params.coding_rate, 0)
    return (params.preamble_symbols + 4.25) * t_sym + payload_symbols * t_sym


def preamble_ms(params: RadioParams) -> float:
    return (params.preamble_symbols + 4.25) * params.symbol_ms


def snr_to_ebn0(snr_db: float, params: RadioParams) -> float:
    b = params.bandwidth_hz
    f = params.sf
    c = 4.0 / params.coding_rate
    return (snr_db - 10 * math.log10(b / 2 ** f) - 10 * math.log10(f)
            - 10 * math.log10(c) + 10 * math.log10(b))


def q_function(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def bit_error_rate(ebn0_db: float, sf: int, scale: str = "linear") -> float:
    if sf not in SPREADING_FACTORS:
        raise ValueError(f"spreading factor {sf} outside 7..12")
    if ebn0_db == math.inf:
        return 0.0
    if scale == "linear":
        ebn0 = 10 ** (ebn0_db / 10)
    elif scale == "db":
        ebn0 = ebn0_db
    else:
        raise ValueError(f"unknown Eb/N0 scale {scale!r}")
    arg = math.log(sf, 12) / math.sqrt(2.0) * ebn0
    return min(1.0, max(0.0, q_function(arg)))


def packet_error_rate(ber: float, total_packet_bytes: int) -> float:
    if not 0.0 <= ber <= 1.0:
        raise ValueError("bit error rate must lie in [0, 1]")
    if ber == 0.0:
        return 0.0
    # log1p keeps precision for tiny BER values
    if ber == 1.0:
        return 1.0 if total_packet_bytes > 0 else 0.0
    return -math.expm1(8 * total_packet_bytes * math.log1p(-ber))


def expected_retransmissions(per: float) -> float:
    if not 0.0 <= per <= 1.0:
        raise ValueError("packet error rate must lie in [0, 1]")
    if per == 1.0:
        raise ValueError("packet error rate of 1 gives an unbounded retransmission count")
    return per / (1.0 - per)


def per_at_snr(snr_db: float, params: RadioParams, total_packet_bytes: int,
               budget: LinkBudget = DEFAULT_BUDGET) -> float:
    ber = bit_error_rate(snr_to_ebn0(snr_db, params), params.sf, budget.ebn0_scale)
    return packet_error_rate(ber, total_packet_bytes)


def noise_floor_dbm(bandwidth_hz: int, budget: LinkBudget = DEFAULT_BUDGET) -> float:
    return THERMAL_NOISE_DBM_HZ + 10 * math.log10(bandwidth_hz) + budget.noise_figure_db


def receiver_sensitivity(params: RadioParams, budget: LinkBudget = DEFAULT_BUDGET) -> float:
    return noise_floor_dbm(params.bandwidth_hz, budget) + budget.snr_limit_db[params.sf]


def transmission_energy(buffer_bytes: int, payload_per_packet: int, params: RadioParams,
                        per: float, profile: EnergyProfile = EnergyProfile(),
                        header_bytes: int = 8) -> float:
    """Joules needed to push ``buffer_bytes`` through in packets of the given payload."""
    if payload_per_packet <= 0:
        raise ValueError("payload per packet must be positive")
    r = expected_retransmissions(per)
    packets = math.ceil(buffer_bytes / payload_per_packet)
    if packets == 0:
        return 0.0
    toa_s = time_on_air(params, payload_per_packet + header_bytes) / 1000.0
    return (1 + r) * packets * toa_s * profile.tx_power_draw_mw / 1000.0


def sample_rssi(tx_dbm: float, distance_m: float, model: PathLossModel,
                rng: random.Random) -> float:
    loss = model.mean_loss_db(distance_m)
    if model.shadowing_sigma_db > 0:
        loss += rng.gauss(0.0, model.shadowing_sigma_db)
    return tx_dbm - loss


@dataclass(frozen=True)
class TransmissionEvent:
    ident: int
    sf: int
    channel: int
    rssi_dbm: float
    start_ms: float = 0.0
    end_ms: float = 0.0
    sender: int = -1
    tx_dbm: float = 14.0
    payload_bytes: int = 0


def survives(victim_sf: int, victim_rssi: float, interferer_sf: int, interferer_rssi: float,
             budget: LinkBudget = DEFAULT_BUDGET) -> bool:
    """Whether the victim is still decodable with one overlapping interferer.

    The victim needs a signal-to-interference ratio of at least the table entry.
    On the same SF the entry is the capture margin, so two signals closer than it
    both fail.
    """
    return victim_rssi - interferer_rssi >= budget.threshold(victim_sf, interferer_sf)


def resolve_concurrent(transmissions: Iterable[TransmissionEvent],
                       budget: LinkBudget = DEFAULT_BUDGET) -> frozenset:
    events = list(transmissions)
    kept = []
    for e in events:
        if all(survives(e.sf, e.rssi_dbm, o.sf, o.rssi_dbm, budget)
               for o in events if o is not e):
            kept.append(e)
    return frozenset(kept)
