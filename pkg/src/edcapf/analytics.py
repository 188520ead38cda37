"""Saturated EDCA analytical model over error-prone channels.

Every function that takes an attempt vector ``tau`` accepts an array whose
last axis runs over access categories; leading axes are broadcast, so a grid
of candidate operating points can be evaluated in one call.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .config import AcClass, NetworkConfig, ProtocolTimings
from .errors import NonConvergence, OutOfRange

FIXED_POINT_TOL = 1e-10
FIXED_POINT_DAMPING = 0.5
FIXED_POINT_MAX_ITER = 10_000
HOMOTOPY_SCALE = 64.0


@dataclass(frozen=True)
class SlotProbabilities:
    p_idle: np.ndarray
    p_tx: np.ndarray
    p_coll_cond: np.ndarray
    p_err: np.ndarray
    p_fail: np.ndarray
    p_block: np.ndarray


def _as_tau(cfg: NetworkConfig, tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if tau.shape[-1:] != (cfg.N,):
        raise ValueError(f"tau must have last dimension {cfg.N}, got shape {tau.shape}")
    return tau


def _frozen(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x.setflags(write=False)
    return x


@functools.lru_cache(maxsize=256)
def packet_error_burst(cfg: NetworkConfig) -> np.ndarray:
    """P_i^E: probability that some packet of a full TXOP burst is corrupted."""
    p = np.array([c.p for c in cfg.classes])
    M = np.array([c.M for c in cfg.classes], dtype=float)
    return _frozen(-np.expm1(M * np.log1p(-p)))


def slot_probabilities(cfg: NetworkConfig, tau) -> SlotProbabilities:
    tau = _as_tau(cfg, tau)
    n = cfg.n
    log_free = np.log1p(-tau)
    log_idle = np.sum(n * log_free, axis=-1, keepdims=True)
    # (1 - tau_i)^(n_i - 1) * prod_{j != i} (1 - tau_j)^(n_j)
    log_others = log_idle - log_free
    others = np.exp(log_others)
    p_idle = np.exp(log_idle[..., 0])
    p_tx = tau * others
    p_coll = -np.expm1(log_others)
    p_err = np.broadcast_to(packet_error_burst(cfg), tau.shape)
    p_fail = 1.0 - (1.0 - p_coll) * (1.0 - p_err)
    t = np.array([c.t for c in cfg.classes], dtype=float)
    exponent = t - cfg.t_min + 1.0
    p_block = -np.expm1(log_others * exponent)
    return SlotProbabilities(p_idle, p_tx, p_coll, np.array(p_err), p_fail, p_block)


def expected_txop_duration(cls: AcClass, timings: ProtocolTimings, L: float) -> float:
    """E(T_i^txop): the burst stops at the first corrupted packet."""
    per_packet = L / cls.r + timings.t_packet_overhead
    t_o = cls.burst_overhead(timings)
    p, M = cls.p, cls.M
    total = 0.0
    for k in range(1, M + 1):
        total += (1 - p) ** (k - 1) * p * (k * per_packet + t_o)
    return total + (1 - p) ** M * (M * per_packet + t_o)


def expected_txop_payload(cls: AcClass, L: float) -> float:
    """E(Pld_i^txop) in bits."""
    p, M = cls.p, cls.M
    total = sum((1 - p) ** k * p * k * L for k in range(1, M))
    return total + (1 - p) ** M * M * L


def expected_burst_packets(cls: AcClass) -> float:
    """Mean number of packets sent in a burst (the delay normaliser)."""
    p, M = cls.p, cls.M
    total = sum(k * (1 - p) ** (k - 1) * p for k in range(1, M + 1))
    return total + M * (1 - p) ** M


@functools.lru_cache(maxsize=256)
def txop_durations(cfg: NetworkConfig) -> np.ndarray:
    return _frozen([expected_txop_duration(c, cfg.timings, cfg.L) for c in cfg.classes])


@functools.lru_cache(maxsize=256)
def txop_payloads(cfg: NetworkConfig) -> np.ndarray:
    return _frozen([expected_txop_payload(c, cfg.L) for c in cfg.classes])


def collision_slot_probability(cfg: NetworkConfig, probs: SlotProbabilities) -> np.ndarray:
    return 1.0 - probs.p_idle - np.sum(cfg.n * probs.p_tx, axis=-1)


def mean_slot_duration(cfg: NetworkConfig, probs: SlotProbabilities) -> np.ndarray:
    """Denominator shared by throughput and air-time."""
    busy = np.sum(cfg.n * probs.p_tx * txop_durations(cfg), axis=-1)
    coll = collision_slot_probability(cfg, probs)
    return probs.p_idle * cfg.timings.sigma + busy + coll * cfg.timings.t_col


def throughput(cfg: NetworkConfig, tau) -> np.ndarray:
    """Per-station throughput in bits/us (numerically Mbps)."""
    tau = _as_tau(cfg, tau)
    probs = slot_probabilities(cfg, tau)
    s = probs.p_tx * txop_payloads(cfg) / mean_slot_duration(cfg, probs)[..., None]
    return np.where(cfg.n > 0, s, 0.0)


def _truncated_collision_count(pc: np.ndarray, m: int) -> np.ndarray:
    total = np.zeros_like(pc)
    for j in range(1, m + 1):
        total += j * pc ** j * (1 - pc)
    return total + (m + 1) * pc ** (m + 1)


def _txop_count(pc: np.ndarray, pe: np.ndarray, m: int) -> np.ndarray:
    total = np.zeros_like(pc)
    for j in range(1, m + 2):
        total += j * (1 - pc) ** j * pe ** (j - 1) * (1 - pe)
    return total + (m + 1) * (1 - pc) ** (m + 1) * pe ** (m + 1)


def delay_components(cfg: NetworkConfig, tau) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(D^col, D^txop, packets per burst) per class, before normalisation."""
    probs = slot_probabilities(cfg, _as_tau(cfg, tau))
    d_col = cfg.timings.t_col * _truncated_collision_count(probs.p_coll_cond, cfg.m)
    d_txop = txop_durations(cfg) * _txop_count(probs.p_coll_cond, probs.p_err, cfg.m)
    packets = np.array([expected_burst_packets(c) for c in cfg.classes])
    return d_col, d_txop, packets


def average_delay(cfg: NetworkConfig, tau) -> np.ndarray:
    """Mean per-packet retransmission delay in us (countdown/blocking ignored)."""
    d_col, d_txop, packets = delay_components(cfg, tau)
    return (d_col + d_txop) / packets


def _geometric(x: np.ndarray, m: int) -> np.ndarray:
    """sum_{j=0}^{m} x^j, finite for every x."""
    total = np.ones_like(x)
    term = np.ones_like(x)
    for _ in range(m):
        term = term * x
        total = total + term
    return total


def backoff_factor(p_fail: np.ndarray, m: int) -> np.ndarray:
    """Mean CW multiplier per attempt: sum (2P)^j / sum P^j over stages 0..m.

    Equals (1-P)(1-(2P)^(m+1)) / ((1-2P)(1-P^(m+1))) without the removable
    singularity at P = 1/2.
    """
    return _geometric(2.0 * p_fail, m) / _geometric(p_fail, m)


def attempt_map(cfg: NetworkConfig, tau, cw=None) -> np.ndarray:
    """One evaluation of the tau <- CW_min relation given the current tau."""
    tau = _as_tau(cfg, tau)
    cw = cfg.cw_min if cw is None else np.asarray(cw, dtype=float)
    probs = slot_probabilities(cfg, tau)
    g = backoff_factor(probs.p_fail, cfg.m)
    free = 2.0 * (1.0 - probs.p_block)
    out = free / (free - 1.0 + cw * g)
    return np.where(cfg.n > 0, out, 0.0)


@dataclass(frozen=True)
class FixedPointResult:
    tau: np.ndarray
    residual: float
    iterations: int


def _fixed_point_newton(cfg, cw, tau, tol, max_iter=100):
    """Newton on ``tau - Phi(tau)`` with a finite-difference Jacobian.

    Converges locally to the nearest root whether or not Picard iteration is
    attracted by it. Returns None when it fails to converge.
    """
    act = cfg.n > 0
    idx = np.flatnonzero(act)
    tau = tau.copy()

    def resid(t):
        return (t - attempt_map(cfg, t, cw))[idx]

    r = resid(tau)
    for _ in range(max_iter):
        norm = float(np.max(np.abs(r)))
        if norm < tol:
            return tau, norm
        J = np.empty((idx.size, idx.size))
        for k, i in enumerate(idx):
            h = 1e-7 * max(tau[i], 1e-3)
            tp = tau.copy()
            tp[i] += h
            J[:, k] = (resid(tp) - r) / h
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return None
        lam = 1.0
        while lam > 1e-6:
            cand = tau.copy()
            cand[idx] = tau[idx] + lam * step
            if np.all((cand[idx] > 0) & (cand[idx] < 1)):
                rc = resid(cand)
                if np.max(np.abs(rc)) < norm:
                    tau, r = cand, rc
                    break
            lam *= 0.5
        else:
            return None
    return None


def _picard(cfg, cw, tau, tol, damping, max_iter):
    residual = np.inf
    for it in range(1, max_iter + 1):
        target = attempt_map(cfg, tau, cw)
        residual = float(np.max(np.abs(tau - target)))
        if residual < tol:
            return tau, residual, it
        tau = (1.0 - damping) * tau + damping * target
    return None, residual, max_iter


def continue_fixed_point(cfg: NetworkConfig, cw_from, tau_from, cw_to, *,
                         tol=FIXED_POINT_TOL, max_steps=400):
    """Follow the root through ``tau_from`` at ``cw_from`` to ``cw_to``.

    Newton continuation along the geometric path between the two windows with
    adaptive steps. Returns ``(tau, residual, steps)`` or None when the branch
    ends (a fold) before ``cw_to``.
    """
    a = np.asarray(cw_from, dtype=float)
    b = np.asarray(cw_to, dtype=float)
    tau = np.asarray(tau_from, dtype=float)
    residual = float(np.max(np.abs(tau - attempt_map(cfg, tau, a))))
    s, ds, steps = 0.0, 0.25, 0
    while s < 1.0 and steps < max_steps:
        steps += 1
        nxt = min(1.0, s + ds)
        out = _fixed_point_newton(cfg, a ** (1 - nxt) * b ** nxt, tau, tol)
        if out is None:
            ds *= 0.5
            if ds < 1e-6:
                return None
            continue
        s, (tau, residual) = nxt, out
        ds = min(0.5, ds * 1.5)
    return (tau, residual, steps) if s >= 1.0 else None


def _homotopy(cfg, cw, tol, damping, max_iter):
    """Continue the root from ``HOMOTOPY_SCALE * CW_min`` down to ``CW_min``.

    At the scaled-up windows attempt probabilities are small, the map is a
    contraction and the root is unique.
    """
    big = cw * HOMOTOPY_SCALE
    tau, _, _ = _picard(cfg, big, np.where(cfg.n > 0, 2.0 / (big + 1.0), 0.0),
                        tol, damping, max_iter)
    if tau is None:
        return None
    return continue_fixed_point(cfg, big, tau, cw, tol=tol)


def solve_attempt_fixed_point(cfg: NetworkConfig, cw=None, *, tol=FIXED_POINT_TOL,
                              damping=FIXED_POINT_DAMPING,
                              max_iter=FIXED_POINT_MAX_ITER, tau0=None) -> FixedPointResult:
    """Joint root of ``tau = Phi(tau; CW_min)``.

    The relation can have several roots when some AC has a very small CW_min.
    With ``tau0`` Newton's method continues the root nearest to it, including
    branches that damped iteration is repelled from. Otherwise the root is the
    one reached by shrinking all windows from a conservative setting (see
    ``_homotopy``), which is also what damped Picard iteration from
    ``2 / (CW_min + 1)`` finds whenever it converges to a unique root.
    """
    cw = cfg.cw_min if cw is None else np.asarray(cw, dtype=float)
    if tau0 is not None:
        start = np.where(cfg.n > 0, np.asarray(tau0, dtype=float), 0.0)
        out = _fixed_point_newton(cfg, cw, start, tol)
        if out is not None:
            return FixedPointResult(out[0], out[1], 0)
    out = _homotopy(cfg, cw, tol, damping, max_iter)
    if out is None:
        out = _fallback(cfg, cw, tol, damping, max_iter)
    if out is None:
        raise NonConvergence("attempt-probability fixed point did not converge", np.inf, max_iter)
    return FixedPointResult(*out)


def _fallback(cfg, cw, tol, damping, max_iter):
    """Damped Picard from the usual start, then Newton from spread-out starts."""
    start = np.where(cfg.n > 0, 2.0 / (cw + 1.0), 0.0)
    for a in (damping, 0.1 * damping):
        tau, residual, it = _picard(cfg, cw, start, 1e-6, a, max_iter)
        if tau is not None:
            out = _fixed_point_newton(cfg, cw, tau, tol)
            if out is not None:
                return out[0], out[1], it
    for level in (0.01, 0.05, 0.2):
        out = _fixed_point_newton(cfg, cw, np.where(cfg.n > 0, level, 0.0), tol)
        if out is not None:
            return out[0], out[1], 0
    return None


def tau_from_cwmin(cfg: NetworkConfig, cw=None, tau0=None) -> np.ndarray:
    """Joint fixed point of the tau / CW_min relation for all classes."""
    return solve_attempt_fixed_point(cfg, cw, tau0=tau0).tau


def cwmin_from_tau(cfg: NetworkConfig, tau, *, check=True) -> np.ndarray:
    """Exact inverse of the tau / CW_min relation (failure and blocking are explicit in tau)."""
    tau = _as_tau(cfg, tau)
    probs = slot_probabilities(cfg, tau)
    g = backoff_factor(probs.p_fail, cfg.m)
    free = 2.0 * (1.0 - probs.p_block)
    with np.errstate(divide="ignore", invalid="ignore"):
        cw = (free * (1.0 / tau - 1.0) + 1.0) / g
    cw = np.where(cfg.n > 0, cw, cfg.cw_min)
    if check:
        bad = cw < 1.0 - 1e-12
        if np.any(bad):
            names = [cfg.names[i] for i in np.flatnonzero(np.atleast_1d(bad)[-cfg.N:])]
            raise OutOfRange(f"attempt probability too aggressive: CW_min < 1 for {names}")
    return cw


def pfail_from_cwmin(cfg: NetworkConfig, cw=None, tau0=None) -> np.ndarray:
    """Analytic failure probability P^F at the fixed point for the given CW_min."""
    tau = tau_from_cwmin(cfg, cw, tau0)
    return slot_probabilities(cfg, tau).p_fail


def delivery_conditioned_pfail(p_fail, m: int):
    """Fraction of delivered packets that needed a retry when each attempt fails w.p. P^F."""
    p_fail = np.asarray(p_fail, dtype=float)
    return 1.0 - (1.0 - p_fail) / (1.0 - p_fail ** (m + 1))


@dataclass(frozen=True)
class Airtimes:
    total: np.ndarray
    success: np.ndarray
    collision: np.ndarray
    idle_fraction: np.ndarray
    collision_slot_fraction: np.ndarray

    def flow_sum(self, n) -> np.ndarray:
        """Sum of flow total air-times over all stations."""
        return np.sum(np.asarray(n) * self.total, axis=-1)


def airtimes(cfg: NetworkConfig, tau) -> Airtimes:
    """Per-flow air-time fractions.

    The idle/success/collision probabilities of the air-time formula are read
    as P^I, sum n_i P_i^T and the conditional collision probability P_i^C.
    """
    tau = _as_tau(cfg, tau)
    probs = slot_probabilities(cfg, tau)
    denom = mean_slot_duration(cfg, probs)[..., None]
    success = probs.p_tx * txop_durations(cfg) / denom
    collision = tau * probs.p_coll_cond * cfg.timings.t_col / denom
    idle = probs.p_idle * cfg.timings.sigma / denom[..., 0]
    coll_slots = collision_slot_probability(cfg, probs) * cfg.timings.t_col / denom[..., 0]
    active = cfg.n > 0
    return Airtimes(np.where(active, success + collision, 0.0), np.where(active, success, 0.0),
                    np.where(active, collision, 0.0), idle, coll_slots)
