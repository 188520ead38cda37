"""Slot-level Monte Carlo simulator of saturated EDCA.

The channel is modelled as a sequence of generic slots: an idle slot of
length sigma, an RTS collision of length T^col, or a TXOP burst. After every
busy slot a station of AC i must observe ``t_i - t_min`` idle slots before
its backoff counter may run again. Stretches of idle slots are skipped in a
single step, so the cost of a run grows with the number of busy slots only.

Random streams: station ``uid`` (creation order, starting at 0) draws from
``PCG64(SeedSequence(seed, spawn_key=(uid,)))``. Backoff values and packet
errors of a station come from its own stream, so adding or removing a station
never perturbs the draws of the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import NetworkConfig
from .errors import ConfigError

_BLOCK = 2048


class _Uniforms:
    __slots__ = ("rng", "buf", "pos")

    def __init__(self, seed: int, uid: int):
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(uid,))))
        self.buf = []
        self.pos = 0

    def __call__(self) -> float:
        if self.pos >= len(self.buf):
            self.buf = self.rng.random(_BLOCK).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


@dataclass
class StationState:
    uid: int
    ac_index: int
    backoff_counter: int
    retry_stage: int = 0
    post_busy_idle_slots: int = 0
    pending_retry_bit: bool = False
    hol_timestamp: float = 0.0
    rng: _Uniforms = field(default=None, repr=False)


@dataclass
class SimResult:
    names: list[str]
    n: np.ndarray
    delivered_packets: np.ndarray
    delivered_bits: np.ndarray
    attempts: np.ndarray
    successful_txops: np.ndarray
    collisions: np.ndarray
    error_terminated_bursts: np.ndarray
    drops: np.ndarray
    retry0_count: np.ndarray
    retry1_count: np.ndarray
    station_slots: np.ndarray
    airtime_us: np.ndarray
    station_time: np.ndarray
    simulated_time: float
    idle_time: float
    collision_time: float
    txop_time: float
    slots: int
    idle_slots: int

    @property
    def measured_tau(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.attempts / self.station_slots

    @property
    def collision_probability(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.collisions / self.attempts

    @property
    def throughput(self) -> np.ndarray:
        """Per-station throughput in bits/us."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.delivered_bits / self.station_time

    @property
    def mean_packet_delay(self) -> np.ndarray:
        """Mean access delay per delivered packet, countdown and blocking included."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.station_time / self.delivered_packets

    @property
    def mean_retx_delay(self) -> np.ndarray:
        """Own air-time (collisions plus bursts) spent per delivered packet."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.airtime_us / self.delivered_packets

    @property
    def idle_slot_fraction(self) -> float:
        return self.idle_slots / self.slots if self.slots else math.nan


@dataclass
class BeaconMeasurement:
    index: int
    start: float
    end: float
    pfail: list
    throughput: np.ndarray
    n: np.ndarray
    retry0: np.ndarray
    retry1: np.ndarray


def estimate_pfail(result) -> list:
    """Retry-bit estimate N^1 / (N^0 + N^1) per AC; ``None`` without deliveries."""
    out = []
    for r0, r1 in zip(result.retry0_count, result.retry1_count):
        total = r0 + r1
        out.append(float(r1) / float(total) if total > 0 else None)
    return out


def quantize_cw(cw) -> np.ndarray:
    return np.maximum(1, np.rint(np.asarray(cw, dtype=float))).astype(int)


class EdcaSimulator:
    """Persistent plant state; call :meth:`advance` or :meth:`run_beacon_window`."""

    def __init__(self, cfg: NetworkConfig, cw_min=None, seed: int = 0):
        self.cfg = cfg
        self.seed = int(seed)
        N = cfg.N
        t = cfg.timings
        self._sigma = t.sigma
        self._t_col = t.t_col
        self._per_packet = [cfg.L / c.r + t.t_packet_overhead for c in cfg.classes]
        self._burst_o = [c.burst_overhead(t) for c in cfg.classes]
        self._p = [c.p for c in cfg.classes]
        self._M = [c.M for c in cfg.classes]
        self._aifsn = [c.t for c in cfg.classes]
        self._L = cfg.L
        self._m = cfg.m
        self.set_cw(cfg.cw_min if cw_min is None else cw_min)
        self.time = 0.0
        self.stations: list[StationState] = []
        self._next_uid = 0
        self._beacon_index = 0
        self._window_end = 0.0

        z = lambda: np.zeros(N, dtype=np.int64)
        self.delivered_packets = z()
        self.attempts = z()
        self.successful_txops = z()
        self.collisions = z()
        self.error_terminated_bursts = z()
        self.drops = z()
        self.retry0 = z()
        self.retry1 = z()
        self.station_slots = z()
        self.delivered_bits = np.zeros(N)
        self.airtime_us = np.zeros(N)
        self.station_time = np.zeros(N)
        self.slots = 0
        self.idle_slots = 0
        self.idle_time = 0.0
        self.collision_time = 0.0
        self.txop_time = 0.0
        self._mark_slots = 0
        self._mark_time = 0.0

        for i, c in enumerate(cfg.classes):
            for _ in range(c.n):
                self._create(i)
        self._update_defer_lengths()

    # membership ---------------------------------------------------------

    def _flush_occupancy(self):
        counts = self.counts()
        self.station_slots += counts * (self.slots - self._mark_slots)
        self.station_time += counts * (self.time - self._mark_time)
        self._mark_slots = self.slots
        self._mark_time = self.time

    def counts(self) -> np.ndarray:
        out = np.zeros(self.cfg.N, dtype=np.int64)
        for st in self.stations:
            out[st.ac_index] += 1
        return out

    def _create(self, ac: int):
        st = StationState(uid=self._next_uid, ac_index=ac, backoff_counter=0,
                          hol_timestamp=self.time, rng=_Uniforms(self.seed, self._next_uid))
        self._next_uid += 1
        st.backoff_counter = int(st.rng() * self._cw[ac])
        self.stations.append(st)
        return st

    def _update_defer_lengths(self):
        present = [self._aifsn[s.ac_index] for s in self.stations]
        t_min = min(present) if present else 0
        self._defer = [a - t_min for a in self._aifsn]

    def add_station(self, ac: int | str):
        ac = self.cfg.index(ac) if isinstance(ac, str) else ac
        self._flush_occupancy()
        st = self._create(ac)
        self._update_defer_lengths()
        st.post_busy_idle_slots = self._defer[ac]

    def remove_station(self, ac: int | str):
        """Remove the most recently added station of the given AC."""
        ac = self.cfg.index(ac) if isinstance(ac, str) else ac
        for k in range(len(self.stations) - 1, -1, -1):
            if self.stations[k].ac_index == ac:
                self._flush_occupancy()
                del self.stations[k]
                self._update_defer_lengths()
                return
        raise ConfigError(f"no station of AC {self.cfg.names[ac]} to remove", field="events")

    def set_error_rate(self, ac: int | str, p: float):
        ac = self.cfg.index(ac) if isinstance(ac, str) else ac
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"p must lie in [0, 1), got {p!r}", field="events.value")
        self._p[ac] = float(p)

    def set_cw(self, cw_min):
        cw = quantize_cw(cw_min)
        if cw.shape != (self.cfg.N,):
            raise ConfigError(f"cw_min must have {self.cfg.N} entries", field="cw_min")
        self._cw = [int(w) for w in cw]

    # event loop ---------------------------------------------------------

    def advance(self, until: float):
        """Simulate until simulated time reaches ``until`` (a busy slot may overshoot)."""
        stations = self.stations
        if not stations:
            raise ConfigError("no stations in the network", field="classes")
        sigma = self._sigma
        defer = self._defer
        while self.time < until:
            need = min(st.post_busy_idle_slots + st.backoff_counter for st in stations)
            if need > 0:
                limit = math.ceil((until - self.time) / sigma - 1e-9)
                k = need if need < limit else limit
                for st in stations:
                    w = st.post_busy_idle_slots
                    if w >= k:
                        st.post_busy_idle_slots = w - k
                    else:
                        st.post_busy_idle_slots = 0
                        st.backoff_counter -= k - w
                self.time += k * sigma
                self.idle_time += k * sigma
                self.slots += k
                self.idle_slots += k
                if k < need or self.time >= until:
                    break
            tx = [st for st in stations if st.post_busy_idle_slots == 0 and st.backoff_counter == 0]
            if len(tx) > 1:
                duration = self._t_col
                for st in tx:
                    a = st.ac_index
                    self.attempts[a] += 1
                    self.collisions[a] += 1
                    self.airtime_us[a] += duration
                    self._fail(st)
                self.collision_time += duration
            else:
                duration = self._txop(tx[0])
                self.txop_time += duration
            self.time += duration
            self.slots += 1
            for st in stations:
                st.post_busy_idle_slots = defer[st.ac_index]

    def _txop(self, st: StationState) -> float:
        a = st.ac_index
        p, M = self._p[a], self._M[a]
        sent = M
        failed = False
        if p > 0.0:
            u = st.rng
            for k in range(1, M + 1):
                if u() < p:
                    sent, failed = k, True
                    break
        ok = sent - 1 if failed else sent
        duration = sent * self._per_packet[a] + self._burst_o[a]
        self.attempts[a] += 1
        self.successful_txops[a] += 1
        self.airtime_us[a] += duration
        if ok:
            if st.pending_retry_bit:
                self.retry1[a] += 1
            else:
                self.retry0[a] += 1
            self.delivered_packets[a] += ok
            self.delivered_bits[a] += ok * self._L
        if failed:
            self.error_terminated_bursts[a] += 1
            self._fail(st)
        else:
            st.retry_stage = 0
            st.pending_retry_bit = False
            st.hol_timestamp = self.time + duration
            st.backoff_counter = int(st.rng() * self._cw[a])
        return duration

    def _fail(self, st: StationState):
        a = st.ac_index
        st.retry_stage += 1
        if st.retry_stage > self._m:
            self.drops[a] += 1
            st.retry_stage = 0
            st.pending_retry_bit = False
        else:
            st.pending_retry_bit = True
        st.backoff_counter = int(st.rng() * (self._cw[a] << st.retry_stage))

    # reporting -----------------------------------------------------------

    def snapshot(self) -> SimResult:
        self._flush_occupancy()
        return SimResult(
            names=self.cfg.names, n=self.counts(),
            delivered_packets=self.delivered_packets.copy(), delivered_bits=self.delivered_bits.copy(),
            attempts=self.attempts.copy(), successful_txops=self.successful_txops.copy(),
            collisions=self.collisions.copy(), error_terminated_bursts=self.error_terminated_bursts.copy(),
            drops=self.drops.copy(), retry0_count=self.retry0.copy(), retry1_count=self.retry1.copy(),
            station_slots=self.station_slots.copy(), airtime_us=self.airtime_us.copy(),
            station_time=self.station_time.copy(), simulated_time=self.time,
            idle_time=self.idle_time, collision_time=self.collision_time, txop_time=self.txop_time,
            slots=self.slots, idle_slots=self.idle_slots,
        )

    def run_beacon_window(self, cw_min=None) -> BeaconMeasurement:
        """Advance exactly one beacon interval under ``cw_min``; state carries over."""
        if cw_min is not None:
            self.set_cw(cw_min)
        start = self._window_end
        end = start + self.cfg.beacon
        bits0 = self.delivered_bits.copy()
        r0, r1 = self.retry0.copy(), self.retry1.copy()
        n = self.counts()
        self.advance(end)
        self._window_end = end
        d0, d1 = self.retry0 - r0, self.retry1 - r1
        pf = [float(b) / float(a + b) if a + b > 0 else None for a, b in zip(d0, d1)]
        with np.errstate(invalid="ignore", divide="ignore"):
            thr = np.where(n > 0, (self.delivered_bits - bits0) / (n * self.cfg.beacon), np.nan)
        meas = BeaconMeasurement(self._beacon_index, start, end, pf, thr, n, d0, d1)
        self._beacon_index += 1
        return meas


def run(cfg: NetworkConfig, cw_min=None, duration: float = 10e6, seed: int = 0) -> SimResult:
    """Simulate ``duration`` us of saturated traffic under fixed ``cw_min``."""
    if not duration > 0:
        raise ConfigError(f"duration must be positive, got {duration!r}", field="duration")
    if not any(c.n >= 1 for c in cfg.classes):
        raise ConfigError("no stations in the network", field="classes")
    sim = EdcaSimulator(cfg, cw_min, seed)
    sim.advance(duration)
    return sim.snapshot()
