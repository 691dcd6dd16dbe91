"""Wire formats and endpoint state machines for joining, synchronization and collection.

All multi-byte fields are big-endian. Field layouts:

    JoinRequest  app_eui:8 dev_eui:8 dev_nonce:2 data_size:3 delay_elasticity:3   (24 B)
    DCSettings   data_rate:4b tx_power:4b ch_mask:2 slot_frame:2 second_stage:2     (7 B)
    JoinAccept   app_nonce:3 net_id:3 dev_addr:4 dl_settings:1 DCSettings           (18 B)
    FSettings    pckt_sizes:6x1 guards_ms:6x2 frame_lens:6x2 data_collection_ms:4
                 next_round_s:3                                                     (37 B)

Per-SF fields are ordered SF7 first. The ACK bitmap puts slot 0 in the most
significant bit of the first byte and pads with zero bits.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from . import phy
from .phy import SPREADING_FACTORS, RadioParams
from .scheduler import (Assignment, FrameStructure, JoinInfo, OutOfRange, SchedulerConfig,
                        SchedulerState, allocate, build_frame_structures)

JOIN_REQUEST_LEN = 24
DC_SETTINGS_LEN = 7
JOIN_ACCEPT_LEN = 11 + DC_SETTINGS_LEN
FSETTINGS_LEN = 37
# MHDR and MIC wrap every join message on air
JOIN_FRAMING_BYTES = 5
MAX_ATTEMPTS = 8


class CodecError(ValueError):
    pass


def _check(value: int, bits: int, name: str):
    if not isinstance(value, int) or value < 0 or value >= 1 << bits:
        raise CodecError(f"{name}={value!r} does not fit in {bits} bits")


def _u24(value: int) -> bytes:
    return value.to_bytes(3, "big")


def _expect_len(data: bytes, n: int, what: str):
    if len(data) != n:
        raise CodecError(f"{what} needs {n} bytes, got {len(data)}")


@dataclass(frozen=True)
class JoinRequest:
    app_eui: int = 0
    dev_eui: int = 0
    dev_nonce: int = 0
    data_size: int = 0
    delay_elasticity: int = 0


def encode_join_request(r: JoinRequest) -> bytes:
    _check(r.app_eui, 64, "app_eui")
    _check(r.dev_eui, 64, "dev_eui")
    _check(r.dev_nonce, 16, "dev_nonce")
    _check(r.data_size, 24, "data_size")
    _check(r.delay_elasticity, 24, "delay_elasticity")
    return (struct.pack(">QQH", r.app_eui, r.dev_eui, r.dev_nonce)
            + _u24(r.data_size) + _u24(r.delay_elasticity))


def decode_join_request(data: bytes) -> JoinRequest:
    _expect_len(data, JOIN_REQUEST_LEN, "join request")
    app_eui, dev_eui, nonce = struct.unpack(">QQH", data[:18])
    return JoinRequest(app_eui, dev_eui, nonce,
                       int.from_bytes(data[18:21], "big"), int.from_bytes(data[21:24], "big"))


# EU868 data rates: DR0 is SF12 ... DR5 is SF7
def sf_to_data_rate(sf: int) -> int:
    if sf not in SPREADING_FACTORS:
        raise CodecError(f"no data rate for SF{sf}")
    return 12 - sf


def data_rate_to_sf(dr: int) -> int:
    if not 0 <= dr <= 5:
        raise CodecError(f"data rate {dr} has no SF mapping")
    return 12 - dr


# power index 0 is 14 dBm, one dB per step
def tx_power_to_index(dbm: int) -> int:
    idx = 14 - dbm
    _check(idx, 4, "tx_power index")
    return idx


def index_to_tx_power(idx: int) -> int:
    return 14 - idx


def channels_to_mask(channels: Sequence[int]) -> int:
    mask = 0
    for ch in channels:
        if not 1 <= ch <= 16:
            raise CodecError(f"channel {ch} outside 1..16")
        mask |= 1 << (ch - 1)
    return mask


def mask_to_channels(mask: int) -> Tuple[int, ...]:
    return tuple(k + 1 for k in range(16) if mask >> k & 1)


@dataclass(frozen=True)
class DCSettings:
    data_rate: int
    tx_power: int
    ch_mask: int
    slot_frame: int
    second_stage: int

    @classmethod
    def from_assignment(cls, a: Assignment, second_stage_s: int) -> "DCSettings":
        return cls(sf_to_data_rate(a.sf), tx_power_to_index(a.tx_power_dbm),
                   channels_to_mask(a.channel_ids), a.slot_index, second_stage_s)


def encode_dc_settings(s: DCSettings) -> bytes:
    _check(s.data_rate, 4, "data_rate")
    _check(s.tx_power, 4, "tx_power")
    _check(s.ch_mask, 16, "ch_mask")
    _check(s.slot_frame, 16, "slot_frame")
    _check(s.second_stage, 16, "second_stage")
    if s.ch_mask == 0:
        raise CodecError("ch_mask must enable at least one channel")
    return struct.pack(">BHHH", s.data_rate << 4 | s.tx_power, s.ch_mask, s.slot_frame,
                       s.second_stage)


def decode_dc_settings(data: bytes) -> DCSettings:
    _expect_len(data, DC_SETTINGS_LEN, "DCSettings")
    head, mask, slot, stage = struct.unpack(">BHHH", data)
    if mask == 0:
        raise CodecError("ch_mask must enable at least one channel")
    return DCSettings(head >> 4, head & 0x0F, mask, slot, stage)


@dataclass(frozen=True)
class JoinAccept:
    app_nonce: int
    net_id: int
    dev_addr: int
    dl_settings: int
    dc_settings: DCSettings


def encode_join_accept(a: JoinAccept) -> bytes:
    _check(a.app_nonce, 24, "app_nonce")
    _check(a.net_id, 24, "net_id")
    _check(a.dev_addr, 32, "dev_addr")
    _check(a.dl_settings, 8, "dl_settings")
    return (_u24(a.app_nonce) + _u24(a.net_id) + struct.pack(">IB", a.dev_addr, a.dl_settings)
            + encode_dc_settings(a.dc_settings))


def decode_join_accept(data: bytes) -> JoinAccept:
    _expect_len(data, JOIN_ACCEPT_LEN, "join accept")
    dev_addr, dl = struct.unpack(">IB", data[6:11])
    return JoinAccept(int.from_bytes(data[0:3], "big"), int.from_bytes(data[3:6], "big"),
                      dev_addr, dl, decode_dc_settings(data[11:]))


@dataclass(frozen=True)
class FSettings:
    pckt_sizes: Tuple[int, ...] = (0,) * 6
    guards_ms: Tuple[int, ...] = (0,) * 6
    frame_lens: Tuple[int, ...] = (0,) * 6
    data_collection_ms: int = 0
    next_round_s: int = 0

    @classmethod
    def from_frames(cls, frames: Dict[int, FrameStructure], data_collection_ms: int,
                    next_round_s: int) -> "FSettings":
        def col(attr):
            return tuple(getattr(frames[sf], attr) if sf in frames else 0
                         for sf in SPREADING_FACTORS)
        return cls(col("packet_bytes"), col("guard_ms"), col("slots_per_frame"),
                   data_collection_ms, next_round_s)


def encode_fsettings(f: FSettings) -> bytes:
    for name, seq, bits in (("pckt_sizes", f.pckt_sizes, 8), ("guards_ms", f.guards_ms, 16),
                            ("frame_lens", f.frame_lens, 16)):
        if len(seq) != 6:
            raise CodecError(f"{name} needs one entry per SF")
        for v in seq:
            _check(v, bits, name)
    _check(f.data_collection_ms, 32, "data_collection_ms")
    _check(f.next_round_s, 24, "next_round_s")
    return (bytes(f.pckt_sizes) + struct.pack(">6H", *f.guards_ms)
            + struct.pack(">6H", *f.frame_lens) + struct.pack(">I", f.data_collection_ms)
            + _u24(f.next_round_s))


def decode_fsettings(data: bytes) -> FSettings:
    _expect_len(data, FSETTINGS_LEN, "FSettings")
    return FSettings(tuple(data[0:6]), struct.unpack(">6H", data[6:18]),
                     struct.unpack(">6H", data[18:30]), struct.unpack(">I", data[30:34])[0],
                     int.from_bytes(data[34:37], "big"))


@dataclass(frozen=True)
class AckBitmap:
    frame_index: int
    slots: int
    bits: bytes

    def encode(self) -> bytes:
        return self.bits


def build_ack_bitmap(received: Set[int], slots: int, frame_index: int = 0) -> AckBitmap:
    buf = bytearray((slots + 7) // 8)
    for s in received:
        if not 0 <= s < slots:
            raise CodecError(f"slot {s} outside 0..{slots - 1}")
        buf[s >> 3] |= 0x80 >> (s & 7)
    return AckBitmap(frame_index, slots, bytes(buf))


def acked(bitmap: AckBitmap, slot: int) -> bool:
    if not 0 <= slot < bitmap.slots:
        raise CodecError(f"slot {slot} outside 0..{bitmap.slots - 1}")
    return bool(bitmap.bits[slot >> 3] & (0x80 >> (slot & 7)))


def decode_ack_bitmap(data: bytes, slots: int, frame_index: int = 0) -> AckBitmap:
    _expect_len(data, (slots + 7) // 8, "ACK bitmap")
    tail = slots & 7
    if tail and data[-1] & (0xFF >> tail):
        raise CodecError("ACK bitmap padding bits must be zero")
    return AckBitmap(frame_index, slots, bytes(data))


# --- endpoint state machines -------------------------------------------------
#
# Both machines are driven by the simulator: it feeds events and carries out
# the returned actions (radio use, timers). Random choices stay with the caller.

IDLE, JOINING, AWAIT_STAGE2, SCHEDULED, DONE = "idle", "joining", "await_stage2", "scheduled", "done"


@dataclass
class DeviceFsm:
    device: int
    confirmed: bool = False
    max_attempts: int = MAX_ATTEMPTS
    phase: str = IDLE
    join_requests: int = 0
    assignment: Optional[Assignment] = None
    stage2_at_ms: float = 0.0
    frame: Optional[FrameStructure] = None
    round_start_ms: float = 0.0
    queue: deque = field(default_factory=deque)  # (packet id, payload bytes)
    attempts: Dict[int, int] = field(default_factory=dict)
    pending: Dict[int, int] = field(default_factory=dict)  # packet id -> frame sent in
    sent: List[int] = field(default_factory=list)
    delivered: List[int] = field(default_factory=list)
    dropped: List[int] = field(default_factory=list)

    def load(self, payloads: Sequence[int]):
        self.queue = deque(enumerate(payloads))


def frame_from_fsettings(settings: FSettings, sf: int, channel_ids: Tuple[int, ...],
                         radio: RadioParams, header_bytes: int) -> FrameStructure:
    """What a device reconstructs from the broadcast: slot length is airtime plus two guards."""
    i = sf - 7
    length = settings.pckt_sizes[i]
    toa = phy.time_on_air(radio.with_sf(sf), length)
    return FrameStructure(sf, length, length - header_bytes, toa, settings.guards_ms[i],
                          settings.frame_lens[i], tuple(channel_ids), 0, 0)


def slot_time_ms(frame: FrameStructure, round_start_ms: float, frame_index: int,
                 channel_index: int, slot_index: int) -> float:
    """Start of a slot (before its leading guard) on the gateway clock."""
    return (round_start_ms + channel_index * frame.slot_ms + frame_index * frame.frame_ms
            + slot_index * frame.slot_ms)


def ack_slot_time_ms(frame: FrameStructure, round_start_ms: float, frame_index: int) -> float:
    last = len(frame.channel_ids) - 1
    return slot_time_ms(frame, round_start_ms, frame_index, last, frame.slots_per_frame)


def device_step(fsm: DeviceFsm, event: tuple) -> Tuple[DeviceFsm, list]:
    kind = event[0]
    if kind == "power_on" and fsm.phase == IDLE:
        fsm.phase = JOINING
        fsm.join_requests += 1
        return fsm, [("send_join",)]
    if kind == "join_windows_closed" and fsm.phase == JOINING:
        fsm.join_requests += 1
        return fsm, [("backoff_then_send_join",)]
    if kind == "join_accept" and fsm.phase == JOINING:
        _, fsm.assignment, fsm.stage2_at_ms = event
        fsm.phase = AWAIT_STAGE2
        return fsm, [("sleep_until", fsm.stage2_at_ms)]
    if kind == "fsettings" and fsm.phase == AWAIT_STAGE2:
        _, settings, now_ms, radio, header_bytes = event
        a = fsm.assignment
        fsm.frame = frame_from_fsettings(settings, a.sf, a.channel_ids, radio, header_bytes)
        fsm.round_start_ms = now_ms + settings.data_collection_ms
        if not fsm.queue:
            fsm.phase = DONE
            return fsm, [("sleep",)]
        fsm.phase = SCHEDULED
        first = slot_time_ms(fsm.frame, fsm.round_start_ms, 0, 0, fsm.assignment.slot_index)
        return fsm, [("sleep_until", first + fsm.frame.guard_ms)]
    if kind == "slot" and fsm.phase == SCHEDULED:
        _, channel_index, frame_index = event
        pick = None
        for pkt, size in fsm.queue:
            if pkt not in fsm.pending:
                pick = (pkt, size)
                break
        if pick is None:
            return fsm, []
        pkt, size = pick
        fsm.attempts[pkt] = fsm.attempts.get(pkt, 0) + 1
        actions = [("transmit", pkt, size, fsm.assignment.channel_ids[channel_index])]
        if fsm.confirmed:
            fsm.pending[pkt] = frame_index
        else:
            fsm.queue.popleft()
            fsm.sent.append(pkt)
            if not fsm.queue:
                fsm.phase = DONE
        return fsm, actions
    if kind == "bitmap" and fsm.phase == SCHEDULED:
        # acked_pkts is None when no bitmap was heard for that frame
        _, frame_index, acked_pkts = event
        acked_pkts = acked_pkts or set()
        for pkt in [p for p, f in fsm.pending.items() if f == frame_index]:
            del fsm.pending[pkt]
            if pkt in acked_pkts:
                fsm.delivered.append(pkt)
            elif fsm.attempts[pkt] >= fsm.max_attempts:
                fsm.dropped.append(pkt)
            else:
                continue
            fsm.queue = deque(p for p in fsm.queue if p[0] != pkt)
        if not fsm.queue:
            fsm.phase = DONE
            return fsm, [("sleep",)]
        return fsm, []
    if kind == "round_end":
        fsm.phase = DONE
        return fsm, []
    raise ValueError(f"device {fsm.device}: event {kind!r} invalid in phase {fsm.phase}")


STAGE1, STAGE2, COLLECTING = "stage1", "stage2", "collecting"


@dataclass
class GatewayFsm:
    config: SchedulerConfig
    budget: object = None
    sf_margin_db: float = 0.0
    phase: str = STAGE1
    state: SchedulerState = field(default_factory=SchedulerState)
    assignments: Dict[int, Assignment] = field(default_factory=dict)
    rejected: Dict[int, str] = field(default_factory=dict)
    frames: Dict[int, FrameStructure] = field(default_factory=dict)
    received: Set[Tuple[int, int]] = field(default_factory=set)
    frame_rx: Dict[Tuple[int, int], Set[int]] = field(default_factory=dict)


def gateway_step(fsm: GatewayFsm, event: tuple) -> Tuple[GatewayFsm, list]:
    kind = event[0]
    if kind == "join_request" and fsm.phase == STAGE1:
        _, join = event
        if join.device in fsm.assignments:
            return fsm, [("send_accept", fsm.assignments[join.device])]
        budget_kw = {} if fsm.budget is None else {"budget": fsm.budget}
        margin_join = JoinInfo(join.device, join.rssi_dbm - fsm.sf_margin_db, join.data_size,
                               join.delay_elasticity)
        try:
            a = allocate(margin_join, fsm.state, fsm.config, **budget_kw)
        except OutOfRange as exc:
            fsm.rejected[join.device] = str(exc)
            return fsm, [("reject", join.device, str(exc))]
        fsm.assignments[join.device] = a
        fsm.rejected.pop(join.device, None)
        return fsm, [("send_accept", a)]
    if kind == "stage1_end" and fsm.phase == STAGE1:
        fsm.phase = STAGE2
        budget_kw = {} if fsm.budget is None else {"budget": fsm.budget}
        fsm.frames = build_frame_structures(fsm.state, fsm.config, **budget_kw)
        return fsm, [("broadcast_fsettings", fsm.frames)]
    if kind == "stage2_end" and fsm.phase == STAGE2:
        fsm.phase = COLLECTING
        return fsm, [("start_rounds", fsm.frames)]
    if kind == "uplink" and fsm.phase == COLLECTING:
        _, sf, frame_index, bit, device, pkt = event
        fsm.frame_rx.setdefault((sf, frame_index), set()).add(bit)
        fsm.received.add((device, pkt))
        return fsm, []
    if kind == "frame_end" and fsm.phase == COLLECTING:
        _, sf, frame_index = event
        frame = fsm.frames[sf]
        bits = frame.slots_per_frame * len(frame.channel_ids)
        got = fsm.frame_rx.pop((sf, frame_index), set())
        return fsm, [("send_bitmap", sf, build_ack_bitmap(got, bits, frame_index))]
    raise ValueError(f"gateway: event {kind!r} invalid in phase {fsm.phase}")
