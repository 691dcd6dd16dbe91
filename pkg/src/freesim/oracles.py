"""Reference values computed from scratch, to pin the main implementation.

Nothing here imports the simulator modules. Airtime uses exact rationals, the
error model uses mpmath at 40 digits, and the sweeps are plain enumerations.
Run ``python -m freesim.oracles DIR`` to regenerate the fixture files.
"""
from __future__ import annotations

import json
import math
import sys
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import mpmath

mpmath.mp.dps = 40

SFS = range(7, 13)
SNR_LIMIT = {7: -6.0, 8: -9.0, 9: -12.0, 10: -15.0, 11: -17.5, 12: -20.0}
# victim row, interferer column, SF 7..12
SIR_TABLE = [
    [1, -8, -9, -9, -9, -9],
    [-11, 1, -11, -12, -13, -13],
    [-15, -13, 1, -13, -14, -15],
    [-19, -18, -17, 1, -17, -18],
    [-22, -22, -21, -20, 1, -20],
    [-25, -25, -25, -24, -23, 1],
]
PLAN = {7: ((1,), 14), 8: ((3,), 13), 9: ((2,), 13), 10: ((2,), 14), 11: ((2, 3), 14),
        12: ((2, 3), 14)}
TX_WATTS = Fraction(132, 1000)
REL = "rel:1e-9"
EXACT = "exact"


def airtime_ms(sf, bw, cr, length, preamble=8, explicit=True, crc=True) -> Fraction:
    tsym = Fraction(2 ** sf * 1000, bw)
    de = 1 if tsym > 16 else 0
    num = 8 * length - 4 * sf + 28 + (16 if crc else 0) - (0 if explicit else 20)
    den = 4 * (sf - 2 * de)
    blocks = -(-num // den)
    n_payload = 8 + max(blocks * cr, 0)
    return (Fraction(preamble) + Fraction(17, 4) + n_payload) * tsym


def ebn0(snr, sf, bw, cr):
    snr, bw = mpmath.mpf(snr), mpmath.mpf(bw)
    rate = mpmath.mpf(4) / cr
    return (snr - 10 * mpmath.log10(bw / 2 ** sf) - 10 * mpmath.log10(sf)
            - 10 * mpmath.log10(rate) + 10 * mpmath.log10(bw))


def gauss_tail(x):
    return mpmath.ncdf(-x)


def ber(ebn0_db, sf, scale):
    e = mpmath.mpf(10) ** (mpmath.mpf(ebn0_db) / 10) if scale == "linear" else mpmath.mpf(ebn0_db)
    return gauss_tail(mpmath.log(sf) / mpmath.log(12) / mpmath.sqrt(2) * e)


def per(b, length):
    return 1 - (1 - mpmath.mpf(b)) ** (8 * length)


def sensitivity(sf, bw, nf=6.0):
    return -174 + 10 * mpmath.log10(bw) + nf + SNR_LIMIT[sf]


@lru_cache(maxsize=None)
def ber_at_limit(sf, bw, cr, scale):
    return ber(ebn0(SNR_LIMIT[sf], sf, bw, cr), sf, scale)


def drain_energy(buffer, length, header, sf, bw, cr, scale, ideal=False):
    p = 0 if ideal else per(ber_at_limit(sf, bw, cr, scale), length)
    if p >= 1:
        return mpmath.inf
    packets = -(-buffer // (length - header))
    t = airtime_ms(sf, bw, cr, length)
    return (1 + p / (1 - p)) * packets * mpmath.mpf(t.numerator) / t.denominator / 1000 * 0.132


def best_length(buffer, sf, bw, cr, header, scale, ideal=False):
    best, arg = mpmath.inf, None
    for length in range(5, 256):
        if length <= header:
            continue
        e = drain_energy(buffer, length, header, sf, bw, cr, scale, ideal)
        if e <= best:
            best, arg = e, length
    return arg


def lowest_sf(rssi, bw, nf=6.0):
    for sf in SFS:
        if sensitivity(sf, bw, nf) < rssi:
            return sf
    return None


def energy_cost(sf, size, bw, cr, header=8):
    t = airtime_ms(sf, bw, cr, 255)
    return Fraction(-(-size // (255 - header))) * t * TX_WATTS


def time_cost(sf, size, count, bw, cr, header=8, duty=Fraction(1, 100)):
    m = len(PLAN[sf][0])
    frames = -(-size // ((255 - header) * m))
    factor = max(count + 1, math.ceil(1 / duty))
    return (factor * frames + (m - 1)) * airtime_ms(sf, bw, cr, 255)


def allocate_loop(joins, alpha, bw, cr, header=8, nf=6.0):
    """joins: (rssi, size) pairs applied in order. Returns chosen SFs (None = rejected)."""
    counts = {sf: 0 for sf in SFS}
    out = []
    for rssi, size in joins:
        low = lowest_sf(rssi, bw, nf)
        if low is None:
            out.append(None)
            continue
        costs = {sf: (time_cost(sf, size, counts[sf], bw, cr, header) if alpha
                      else energy_cost(sf, size, bw, cr, header)) for sf in SFS if sf >= low}
        pick = min(costs, key=lambda sf: (costs[sf], sf))
        counts[pick] += 1
        out.append(pick)
    return out


def pair_outcome(sf_a, rssi_a, sf_b, rssi_b):
    """Both directions of the capture rule: a signal survives when its margin over the
    other reaches the table entry for (its SF, the other's SF)."""
    a_ok = rssi_a - rssi_b >= SIR_TABLE[sf_a - 7][sf_b - 7]
    b_ok = rssi_b - rssi_a >= SIR_TABLE[sf_b - 7][sf_a - 7]
    return a_ok, b_ok


def guard(devices, packets, channels, toa, skew=Fraction(15, 10 ** 6), frame_factor=100):
    span = (max(devices, frame_factor) * packets + channels - 1) * Fraction(toa)
    return max(1, math.ceil(skew * span))


def min_slots(devices, toa, g, duty=Fraction(1, 100)):
    toa, g = Fraction(toa), Fraction(g)
    return max(devices, math.ceil((toa / duty) / (toa + 2 * g)))


def years(avg_watts, battery_wh=3.3):
    return battery_wh / avg_watts / 8766


# --- message layouts, byte by byte ---------------------------------------------

def be(value, n):
    return bytes((value >> (8 * (n - 1 - i))) & 0xFF for i in range(n))


def join_request_bytes(app_eui, dev_eui, dev_nonce, data_size, elasticity):
    return be(app_eui, 8) + be(dev_eui, 8) + be(dev_nonce, 2) + be(data_size, 3) + be(elasticity, 3)


def dc_settings_bytes(sf, tx_dbm, channels, slot, second_stage):
    dr, power = 12 - sf, 14 - tx_dbm
    mask = 0
    for ch in channels:
        mask |= 1 << (ch - 1)
    return bytes([(dr << 4) | power]) + be(mask, 2) + be(slot, 2) + be(second_stage, 2)


def join_accept_bytes(app_nonce, net_id, dev_addr, dl_settings, dc):
    return be(app_nonce, 3) + be(net_id, 3) + be(dev_addr, 4) + bytes([dl_settings]) + dc


def fsettings_bytes(sizes, guards, frame_lens, collection_ms, next_round_s):
    out = bytes(sizes)
    for g in guards:
        out += be(g, 2)
    for s in frame_lens:
        out += be(s, 2)
    return out + be(collection_ms, 4) + be(next_round_s, 3)


def bitmap_bytes(received, slots):
    n = -(-slots // 8)
    value = 0
    for i in received:
        value |= 1 << (8 * n - 1 - i)
    return be(value, n)


# --- fixture generation ----------------------------------------------------------

def _num(x):
    if isinstance(x, Fraction):
        return float(x)
    if isinstance(x, mpmath.mpf):
        return float(x)
    return x


def golden_vectors():
    """Yield (operation, inputs, expected, tolerance, provenance)."""
    v = []
    add = lambda *row: v.append(row)

    add("time_on_air", {"sf": 7, "bw": 125000, "cr": 5, "bytes": 20}, 56.576, REL,
        "symbol count by hand: 12.544 + 43 * 1.024")
    add("time_on_air", {"sf": 7, "bw": 500000, "cr": 5, "bytes": 20}, 14.144, REL,
        "quarter of the 125 kHz case")
    for bw in (125000, 250000, 500000):
        for cr in (5, 8):
            for sf in SFS:
                for length in (1, 13, 20, 27, 51, 100, 222, 255):
                    add("time_on_air", {"sf": sf, "bw": bw, "cr": cr, "bytes": length},
                        _num(airtime_ms(sf, bw, cr, length)), REL, "exact rational airtime")

    add("snr_to_ebn0", {"snr": -6.0, "sf": 7, "bw": 125000, "cr": 5},
        _num(ebn0(-6, 7, 125000, 5)), REL, "hand arithmetic, about +7.59 dB")
    add("snr_to_ebn0", {"snr": -20.0, "sf": 12, "bw": 125000, "cr": 5},
        _num(ebn0(-20, 12, 125000, 5)), REL, "regression constant, 40-digit evaluation")
    for bw in (125000, 500000):
        for sf in SFS:
            add("snr_to_ebn0", {"snr": SNR_LIMIT[sf], "sf": sf, "bw": bw, "cr": 5},
                _num(ebn0(SNR_LIMIT[sf], sf, bw, 5)), REL, "at the demodulation limit")

    add("bit_error_rate", {"ebn0_db": 7.59, "sf": 7, "scale": "linear"},
        _num(ber(7.59, 7, "linear")), REL, "Gaussian tail at argument near 3.18")
    for scale in ("linear", "db"):
        for sf in SFS:
            for e in (-3.0, 0.0, 2.5, 5.0, 7.59, 9.0):
                add("bit_error_rate", {"ebn0_db": e, "sf": sf, "scale": scale},
                    _num(ber(e, sf, scale)), REL, "mpmath normal tail")

    add("packet_error_rate", {"ber": 1e-4, "bytes": 255}, _num(per(mpmath.mpf("1e-4"), 255)),
        REL, "1 - (1 - 1e-4)^2040")
    for b in (1e-9, 1e-6, 1e-3, 0.05):
        for length in (1, 20, 255):
            add("packet_error_rate", {"ber": b, "bytes": length}, _num(per(mpmath.mpf(b), length)),
                REL, "direct power")

    add("expected_retransmissions", {"per": 0.9}, 9.0, REL, "0.9 / 0.1")
    add("expected_retransmissions", {"per": 0.25}, 1 / 3, REL, "0.25 / 0.75")

    for bw in (125000, 500000):
        for sf in SFS:
            add("receiver_sensitivity", {"sf": sf, "bw": bw, "nf": 6.0},
                _num(sensitivity(sf, bw)), REL, "thermal floor plus NF plus SNR limit")

    for bw in (125000, 500000):
        t = airtime_ms(7, bw, 5, 255)
        add("transmission_energy", {"buffer": 5760, "payload": 247, "sf": 7, "bw": bw, "per": 0.0},
            _num(24 * t / 1000 * TX_WATTS), REL, "ceil(5760/247) = 24 packets of 255 B")
    add("transmission_energy", {"buffer": 5760, "payload": 247, "sf": 10, "bw": 500000, "per": 0.5},
        _num(2 * 24 * airtime_ms(10, 500000, 5, 255) / 1000 * TX_WATTS), REL, "(1 + R) = 2")

    add("mean_rssi", {"tx_dbm": 14.0, "distance_m": 400.0}, -134.21, REL, "+20.8 dB per decade")
    add("mean_rssi", {"tx_dbm": 14.0, "distance_m": 40.0}, -113.41, REL, "reference loss")

    for sf_a in SFS:
        for sf_b in SFS:
            for delta in range(-30, 31):
                a, b = pair_outcome(sf_a, -100.0 + delta, sf_b, -100.0)
                add("pair_survival", {"sf_a": sf_a, "rssi_a": -100.0 + delta, "sf_b": sf_b,
                                      "rssi_b": -100.0}, [a, b], EXACT, "capture table lookup")
    add("plan_equal_distance", {"rssi_at_14dbm": -110.0}, 8, EXACT,
        "all eight SF/channel pairs of the power plan survive together")

    for rssi, bw in ((-100.0, 125000), (-130.0, 125000), (-140.0, 125000), (-110.0, 500000),
                     (-128.0, 500000), (-131.0, 500000)):
        sf = lowest_sf(rssi, bw)
        add("min_spreading_factor", {"rssi": rssi, "bw": bw}, sf if sf else "OutOfRange", EXACT,
            "first SF whose sensitivity lies below the rssi")

    for bw in (125000, 500000):
        for sf in SFS:
            for size in (0, 20, 5760):
                add("cost_energy", {"sf": sf, "size": size, "bw": bw}, _num(energy_cost(sf, size, bw, 5)),
                    REL, "packets of 247 B payload")
        for sf in SFS:
            for count in (0, 99, 250):
                add("cost_time", {"sf": sf, "size": 5760, "count": count, "bw": bw},
                    _num(time_cost(sf, 5760, count, bw, 5)), REL, "frame factor max(X+1, 100)")

    for alpha in (0, 1):
        picks = allocate_loop([(-60.0, 5760)] * 300, alpha, 500000, 5)
        add("allocate_counts", {"alpha": alpha, "devices": 300, "rssi": -60.0, "size": 5760,
                                "bw": 500000}, [picks.count(sf) for sf in SFS], EXACT,
            "sequential greedy loop")
    rssis = [-100.0 - (i * 37 % 31) for i in range(200)]
    sizes = [20 * (1 + (i * 53 % 400)) for i in range(200)]
    for alpha in (0, 1):
        picks = allocate_loop(list(zip(rssis, sizes)), alpha, 500000, 5)
        add("allocate_sequence", {"alpha": alpha, "rssi": rssis, "size": sizes, "bw": 500000},
            picks, EXACT, "sequential greedy loop over mixed joins")

    for scale in ("db", "linear"):
        for bw in (125000, 500000):
            for sf in SFS:
                for size in (100, 239, 1500, 5760):
                    add("optimal_packet_length", {"size": size, "sf": sf, "bw": bw, "header": 8,
                                                  "scale": scale},
                        best_length(size, sf, bw, 5, 8, scale), EXACT, "exhaustive sweep 5..255")
    for sf in SFS:
        add("optimal_packet_length", {"size": 1500, "sf": sf, "bw": 500000, "header": 7,
                                      "scale": "db"},
            best_length(1500, sf, 500000, 5, 7, "db"), EXACT, "sweep with a 7 byte header")
        add("optimal_packet_length_ideal", {"size": 5760, "sf": sf, "bw": 500000, "header": 8},
            best_length(5760, sf, 500000, 5, 8, "db", ideal=True), EXACT, "header amortization")

    add("guard_ms", {"devices": 200, "packets": 24, "channels": 1, "toa": 400.0},
        guard(200, 24, 1, 400), EXACT, "ceil(28.8)")
    for devices, packets, channels, toa in ((0, 0, 1, 100.0), (10, 24, 2, 1025.024),
                                            (500, 25, 1, 97.344), (50, 3, 2, 1927.168)):
        add("guard_ms", {"devices": devices, "packets": packets, "channels": channels, "toa": toa},
            guard(devices, packets, channels, toa), EXACT, "clamped to 1 ms")
    add("slots_per_frame", {"devices": 5, "toa": 100.0, "guard": 50.0}, min_slots(5, 100, 50),
        EXACT, "ceil(100 T / 2 T) = 50")
    for devices, toa, g in ((5, 100.0, 0.0), (250, 100.0, 0.0), (3, 553.472, 7.0)):
        add("slots_per_frame", {"devices": devices, "toa": toa, "guard": g},
            min_slots(devices, toa, g), EXACT, "duty-cycle minimum")

    add("lifetime_years", {"avg_watts": 37.6e-6}, years(37.6e-6), REL, "3.3 Wh / 37.6 uW / 8766 h")

    add("ack_bitmap", {"received": [0, 7], "slots": 8}, bitmap_bytes([0, 7], 8).hex(), EXACT,
        "slot 0 is the most significant bit")
    add("join_request", {"app_eui": 0, "dev_eui": 0, "dev_nonce": 0, "data_size": 5760,
                         "delay_elasticity": 0},
        join_request_bytes(0, 0, 0, 5760, 0).hex(), EXACT, "5760 = 0x001680")
    return v


def message_vectors():
    """Per-message (fields, hex) pairs built byte by byte."""
    jr = []
    for i, (eui, dev, nonce, size, el) in enumerate([
            (0, 0, 0, 0, 0), (0, 0, 0, 5760, 0), (0x70B3D57ED0000001, 0x0004A30B001C0530, 0xBEEF,
                                                   5760, 86400),
            (2 ** 64 - 1, 2 ** 64 - 1, 65535, 2 ** 24 - 1, 2 ** 24 - 1), (1, 2, 3, 11520, 43200)]):
        jr.append(({"app_eui": eui, "dev_eui": dev, "dev_nonce": nonce, "data_size": size,
                    "delay_elasticity": el}, join_request_bytes(eui, dev, nonce, size, el).hex()))
    ja = []
    for sf, power, chans, slot, stage2, nonce, net, addr, dl in [
            (7, 14, (1,), 0, 600, 1, 0x13, 0x26011BDA, 0), (8, 13, (3,), 41, 1200, 7, 0, 1, 0),
            (11, 14, (2, 3), 321, 3600, 0xFFFFFF, 0xFFFFFF, 0xFFFFFFFF, 255),
            (12, 14, (2, 3), 65535, 65535, 5, 6, 7, 8), (10, 14, (2,), 264, 0, 0, 0, 0, 0)]:
        dc = dc_settings_bytes(sf, power, chans, slot, stage2)
        ja.append(({"app_nonce": nonce, "net_id": net, "dev_addr": addr, "dl_settings": dl,
                    "dc_settings": {"sf": sf, "tx_power_dbm": power, "channels": list(chans),
                                    "slot": slot, "second_stage_s": stage2}},
                   join_accept_bytes(nonce, net, addr, dl, dc).hex()))
    fs = []
    for sizes, guards, lens, coll, nxt in [
            ([255] * 6, [1, 2, 3, 4, 5, 6], [100] * 6, 0, 0),
            ([248, 242, 228, 249, 253, 228], [4, 7, 14, 64, 70, 90], [93, 93, 91, 265, 322, 232],
             59321, 86400),
            ([0, 0, 0, 0, 0, 0], [0] * 6, [0] * 6, 2 ** 32 - 1, 2 ** 24 - 1),
            ([20, 0, 255, 0, 13, 9], [1, 0, 65535, 0, 2, 3], [101, 0, 65535, 0, 7, 100], 1, 1)]:
        fs.append(({"pckt_sizes": sizes, "guards_ms": guards, "frame_lens": lens,
                    "data_collection_ms": coll, "next_round_s": nxt},
                   fsettings_bytes(sizes, guards, lens, coll, nxt).hex()))
    ab = []
    for received, slots in [([], 8), ([0, 7], 8), (list(range(8)), 8), ([0], 1), ([2, 9], 12),
                            ([0, 99], 100), (list(range(0, 265, 3)), 265)]:
        ab.append(({"received": received, "slots": slots}, bitmap_bytes(received, slots).hex()))
    return {"join_request": jr, "join_accept": ja, "fsettings": fs, "ack_bitmap": ab}


def write_fixtures(directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["# operation\tinputs (JSON)\texpected (JSON)\ttolerance\tprovenance"]
    for op, inputs, expected, tol, note in golden_vectors():
        lines.append("\t".join([op, json.dumps(inputs, sort_keys=True), json.dumps(expected),
                                tol, note]))
    (d / "golden_vectors.tsv").write_text("\n".join(lines) + "\n")
    for name, rows in message_vectors().items():
        body = ["# fields (JSON)\twire bytes (hex)"]
        body += [json.dumps(fields, sort_keys=True) + "\t" + wire for fields, wire in rows]
        (d / f"{name}.tsv").write_text("\n".join(body) + "\n")


if __name__ == "__main__":
    write_fixtures(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures")
