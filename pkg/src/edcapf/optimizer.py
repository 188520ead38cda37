"""Delay-constrained proportional fairness.

Maximise ``sum_i n_i log s_i(tau)`` subject to ``D_i(tau) <= d_i``. The search
runs over ``eta_i = log(tau_i / (1 - tau_i))``. Multipliers are found by
projected dual ascent; for each multiplier vector the Lagrangian is maximised
over eta, and the optimal eta is read off at the final multipliers.

Delay constraints are handled in the normalised form ``D_i / d_i - 1 <= 0``,
so the reported multipliers are dimensionless. Optionally the windows can be
required to be realisable, ``cw_floor / CW_i(tau) - 1 <= 0`` (this form keeps
the Lagrangian bounded as tau -> 0); the optimum of
the unconstrained program may need CW_min < 1 for low-priority classes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import analytics
from .config import NetworkConfig
from .errors import DomainError, Infeasible, NonConvergence

FD_STEP = 1e-6
HESSIAN_STEP = 1e-4
ETA_BOUND = 30.0
GRAD_TOL = 1e-7
INNER_MAX_STEPS = 2000
SUBGRADIENT_A = 10.0
SUBGRADIENT_B = 10.0
SUBGRADIENT_MAX_ITER = 5000
SUBGRADIENT_WARMUP = 50
MULTIPLIER_TOL = 1e-6
VIOLATION_TOL = 1e-6
PROBE_POINTS = 17
RESTARTS = 5


@dataclass
class OperatingPoint:
    names: list[str]
    n: np.ndarray
    tau_star: np.ndarray
    cw_min_star: np.ndarray
    p_fail_star: np.ndarray
    throughputs: np.ndarray
    delays: np.ndarray
    deadlines: np.ndarray
    airtimes: np.ndarray
    airtime_success: np.ndarray
    airtime_collision: np.ndarray
    utility: float
    multipliers: np.ndarray
    kkt_residual: float
    dual_iterations: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def airtime_sum(self) -> float:
        return float(np.sum(self.n * self.airtimes))

    @property
    def realizable(self) -> bool:
        active = self.n > 0
        return bool(np.all(self.cw_min_star[active] >= 1.0))


def _sigmoid(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _logit(tau):
    tau = np.asarray(tau, dtype=float)
    return np.log(tau) - np.log1p(-tau)


def utility(cfg: NetworkConfig, tau) -> float:
    """Sum of n_i log s_i over classes that have stations."""
    s = analytics.throughput(cfg, tau)
    active = cfg.active
    if np.any(s[..., active] <= 0):
        raise DomainError("utility undefined: a populated class has zero throughput")
    return np.sum(cfg.n[active] * np.log(s[..., active]), axis=-1)


class _Problem:
    """The program restricted to populated classes, in eta coordinates."""

    def __init__(self, cfg: NetworkConfig, cw_floor: float | None = None):
        self.full = cfg
        self.mask = cfg.active
        self.cfg = cfg.subset(self.mask)
        self.n = self.cfg.n
        self.d = np.array([c.d for c in self.cfg.classes], dtype=float)
        self.dim = self.cfg.N
        self.cw_floor = cw_floor
        self.n_constraints = self.dim * (1 if cw_floor is None else 2)

    def tau(self, eta):
        return _sigmoid(np.clip(eta, -ETA_BOUND, ETA_BOUND))

    def U(self, eta):
        s = analytics.throughput(self.cfg, self.tau(eta))
        with np.errstate(divide="ignore"):
            return np.sum(self.n * np.log(s), axis=-1)

    def g(self, eta):
        tau = self.tau(eta)
        D = analytics.average_delay(self.cfg, tau)
        g = D / self.d - 1.0
        if self.cw_floor is None:
            return g
        with np.errstate(divide="ignore", invalid="ignore"):
            cw = analytics.cwmin_from_tau(self.cfg, tau, check=False)
        return np.concatenate([g, self.cw_floor / cw - 1.0], axis=-1)

    def lagrangian(self, eta, lam):
        return self.U(eta) - np.sum(lam * self.g(eta), axis=-1)

    def embed(self, values, fill=0.0):
        out = np.full(self.full.N, fill, dtype=float)
        out[self.mask] = values
        return out


def fd_gradient(f, x, h=FD_STEP):
    """Central differences; ``f`` is evaluated once on a stacked batch."""
    x = np.asarray(x, dtype=float)
    E = np.eye(x.size) * h
    vals = f(np.concatenate([x + E, x - E]))
    return (vals[: x.size] - vals[x.size:]) / (2 * h)


def fd_hessian(f, x, h=HESSIAN_STEP):
    x = np.asarray(x, dtype=float)
    k = x.size
    pts = [x]
    pairs = list(itertools.combinations_with_replacement(range(k), 2))
    for i, j in pairs:
        ei = np.zeros(k); ei[i] = h
        ej = np.zeros(k); ej[j] = h
        pts += [x + ei + ej, x + ei - ej, x - ei + ej, x - ei - ej]
    vals = f(np.array(pts))
    H = np.empty((k, k))
    for idx, (i, j) in enumerate(pairs):
        a, b, c, d = vals[1 + 4 * idx: 5 + 4 * idx]
        H[i, j] = H[j, i] = (a - b - c + d) / (4 * h * h)
    return H


def richardson_gap(f, x, h=FD_STEP) -> float:
    """Relative disagreement between central-difference gradients at h and h/2.

    The extrapolated estimate ``(4 g(h/2) - g(h)) / 3`` is compared with
    ``g(h/2)``; central differences are consistent when the gap is at the
    level of rounding noise.
    """
    g1 = fd_gradient(f, x, h)
    g2 = fd_gradient(f, x, h / 2)
    extrap = (4 * g2 - g1) / 3
    scale = max(1.0, float(np.max(np.abs(extrap))))
    return float(np.max(np.abs(extrap - g2))) / scale


def _maximize(f, x0, *, tol=GRAD_TOL, max_steps=INNER_MAX_STEPS):
    """Newton ascent with backtracking; falls back to the gradient when the
    FD Hessian is not negative definite or the Newton step fails to ascend."""
    x = np.clip(np.asarray(x0, dtype=float), -ETA_BOUND, ETA_BOUND)
    fx = float(f(x[None])[0])
    grad = fd_gradient(f, x)
    for step in range(max_steps):
        if np.max(np.abs(grad)) < tol:
            return x, fx, step
        H = fd_hessian(f, x)
        direction = None
        try:
            np.linalg.cholesky(-H)
            direction = np.linalg.solve(-H, grad)
        except np.linalg.LinAlgError:
            direction = grad.copy()
        if float(direction @ grad) <= 0:
            direction = grad.copy()
        longest = float(np.max(np.abs(direction)))
        if longest > 2.0:
            direction *= 2.0 / longest
        t = 1.0
        improved = False
        while t > 1e-12:
            cand = np.clip(x + t * direction, -ETA_BOUND, ETA_BOUND)
            fc = float(f(cand[None])[0])
            if fc >= fx + 1e-4 * t * float(direction @ grad) and np.isfinite(fc):
                improved = True
                break
            t *= 0.5
        if not improved:
            # Flat to FD precision: accept the point.
            return x, fx, step
        x, fx = cand, fc
        grad = fd_gradient(f, x)
    return x, fx, max_steps


def _starts(prob: _Problem, restarts: int):
    total = float(np.sum(prob.n))
    base = np.full(prob.dim, _logit(min(0.5, 1.0 / (total + 1.0))))
    starts = [base]
    for r in range(1, restarts):
        rng = np.random.default_rng(r)
        tau0 = np.exp(rng.uniform(np.log(0.002), np.log(0.5), prob.dim))
        starts.append(_logit(tau0))
    return starts


def _best_inner(prob: _Problem, lam, starts):
    best = None
    for idx, s in enumerate(starts):
        f = lambda e: prob.lagrangian(e, lam)
        x, fx, _ = _maximize(f, s)
        if best is None or fx > best[1] + 1e-12:
            best = (x, fx, idx)
    return best


def probe_feasibility(cfg: NetworkConfig, points: int = PROBE_POINTS):
    """Coarse tau-grid search for a point meeting every delay deadline.

    Returns ``(feasible, best_tau, worst_ratio)`` where ``worst_ratio`` is
    the smallest attainable max_i D_i/d_i on the grid.
    """
    prob = _Problem(cfg)
    axis = np.arange(1, points + 1) / (points + 1)
    grid = np.stack(np.meshgrid(*([axis] * prob.dim), indexing="ij"), axis=-1).reshape(-1, prob.dim)
    ratio = np.max(prob.g(_logit(grid)) + 1.0, axis=-1)
    k = int(np.argmin(ratio))
    return bool(ratio[k] <= 1.0), prob.embed(grid[k]), float(ratio[k])


def _dual_newton(prob: _Problem, lam, eta, *, max_iter=50, tol=1e-10):
    """Refine multipliers by Newton's method on the active constraints.

    d g_i / d lam_j = grad g_i^T (-H_L)^{-1} grad g_j (with sign), from the
    implicit stationarity of the Lagrangian.
    """
    lam = lam.copy()
    for it in range(max_iter):
        f = lambda e: prob.lagrangian(e, lam)
        eta, _, _ = _maximize(f, eta)
        g = prob.g(eta[None])[0]
        active = (lam > 0) | (g > 0)
        viol = max(float(np.max(np.abs(g[active]))) if active.any() else 0.0,
                   float(np.max(np.maximum(g, 0.0))))
        if viol < tol:
            return lam, eta, it
        idx = np.flatnonzero(active)
        HL = fd_hessian(f, eta)
        Jg = np.array([fd_gradient(lambda e, i=i: prob.g(e)[..., i], eta) for i in idx])
        try:
            W = np.linalg.solve(HL, Jg.T)
        except np.linalg.LinAlgError:
            break
        J = Jg @ W
        try:
            delta = np.linalg.solve(J, -g[idx])
        except np.linalg.LinAlgError:
            delta = -g[idx] / np.minimum(np.diag(J), -1e-12)
        new = lam[idx] + delta
        # Damp to keep multipliers nonnegative.
        lam[idx] = np.maximum(new, 0.0)
    f = lambda e: prob.lagrangian(e, lam)
    eta, _, _ = _maximize(f, eta)
    return lam, eta, max_iter


def solve(cfg: NetworkConfig, *, restarts: int = RESTARTS, probe: bool = True,
          subgradient_iters: int = SUBGRADIENT_WARMUP,
          cw_floor: float | None = None) -> OperatingPoint:
    """Optimal operating point; ``cw_floor`` adds CW_i(tau) >= cw_floor."""
    prob = _Problem(cfg, cw_floor)
    finite = np.isfinite(prob.d)
    if probe and finite.any():
        ok, best_tau, ratio = probe_feasibility(cfg)
        if not ok:
            raise Infeasible(
                f"no grid point meets all delay deadlines (best max D/d = {ratio:.4g})",
                probe={"best_tau": best_tau, "best_ratio": ratio})

    starts = _starts(prob, restarts)
    lam = np.zeros(prob.n_constraints)
    eta, _, _ = _best_inner(prob, lam, starts)
    g = prob.g(eta[None])[0]
    iters = 0
    if np.any(g > VIOLATION_TOL):
        # Projected subgradient on the dual, diminishing step a/(b+k).
        for k in range(min(subgradient_iters, SUBGRADIENT_MAX_ITER)):
            step = SUBGRADIENT_A / (SUBGRADIENT_B + k)
            new = np.maximum(0.0, lam + step * g)
            moved = float(np.max(np.abs(new - lam)))
            lam = new
            eta, _, _ = _maximize(lambda e: prob.lagrangian(e, lam), eta)
            g = prob.g(eta[None])[0]
            iters = k + 1
            if moved < MULTIPLIER_TOL and np.max(g) < VIOLATION_TOL:
                break
        lam, eta, extra = _dual_newton(prob, lam, eta)
        iters += extra
        # Guard against a local maximiser of the Lagrangian.
        cand, fc, _ = _best_inner(prob, lam, starts + [eta])
        f = lambda e: prob.lagrangian(e, lam)
        if fc > float(f(eta[None])[0]) + 1e-9:
            lam, eta, extra = _dual_newton(prob, lam, cand)
            iters += extra

    if cw_floor is not None:
        eta = _snap_to_floor(prob, eta)
    g = prob.g(eta[None])[0]
    if np.max(g) > VIOLATION_TOL or np.max(np.abs(lam * g)) > 1e-6:
        raise NonConvergence(
            "dual ascent stalled before meeting the deadlines",
            residual=float(max(np.max(g), np.max(np.abs(lam * g)))), iterations=iters)
    return _operating_point(cfg, prob, eta, lam, iters)


def _snap_to_floor(prob: _Problem, eta):
    """Move windows that undershoot the floor within tolerance onto it exactly."""
    tau = prob.tau(eta)
    cw = analytics.cwmin_from_tau(prob.cfg, tau, check=False)
    if np.all(cw >= prob.cw_floor):
        return eta
    snapped = analytics.tau_from_cwmin(prob.cfg, np.maximum(cw, prob.cw_floor), tau0=tau)
    return _logit(snapped)


def _operating_point(cfg, prob: _Problem, eta, lam, iters) -> OperatingPoint:
    tau = prob.embed(prob.tau(eta))
    probs = analytics.slot_probabilities(cfg, tau)
    air = analytics.airtimes(cfg, tau)
    cw = analytics.cwmin_from_tau(cfg, np.where(cfg.active, tau, 0.5), check=False)
    cw = np.where(cfg.active, cw, cfg.cw_min)
    point = OperatingPoint(
        names=cfg.names, n=cfg.n, tau_star=tau, cw_min_star=cw,
        p_fail_star=np.where(cfg.active, probs.p_fail, np.nan),
        throughputs=analytics.throughput(cfg, tau),
        delays=np.where(cfg.active, analytics.average_delay(cfg, tau), np.nan),
        deadlines=np.array([c.d for c in cfg.classes], dtype=float),
        airtimes=air.total, airtime_success=air.success, airtime_collision=air.collision,
        utility=float(prob.U(eta[None])[0]), multipliers=prob.embed(lam[:prob.dim]),
        kkt_residual=0.0, dual_iterations=iters,
    )
    if prob.cw_floor is not None:
        point.diagnostics["cw_floor"] = prob.cw_floor
        point.diagnostics["cw_multipliers"] = prob.embed(lam[prob.dim:])
    point.kkt_residual = kkt_residual(cfg, point)
    return point


def kkt_breakdown(cfg: NetworkConfig, point: OperatingPoint) -> dict:
    prob = _Problem(cfg, point.diagnostics.get("cw_floor"))
    mask = prob.mask
    eta = _logit(np.asarray(point.tau_star, dtype=float)[mask])
    lam = np.asarray(point.multipliers, dtype=float)[mask]
    if prob.cw_floor is not None:
        lam = np.concatenate([lam, np.asarray(point.diagnostics["cw_multipliers"])[mask]])
    grad = fd_gradient(lambda e: prob.lagrangian(e, lam), eta)
    g = prob.g(eta[None])[0]
    return {
        "stationarity": float(np.max(np.abs(grad))),
        "dual_feasibility": float(np.max(np.maximum(-lam, 0.0))),
        "complementary_slackness": float(np.max(np.abs(lam * g))),
        "primal_feasibility": float(np.max(np.maximum(g, 0.0))),
    }


def kkt_residual(cfg: NetworkConfig, point: OperatingPoint) -> float:
    return max(kkt_breakdown(cfg, point).values())
