"""LQI tuning of per-AC CW_min from measured failure probabilities.

The plant is memoryless: the failure probability measured over a beacon
interval depends only on the CW_min applied during it. Around an operating
point it is linearised as ``dp = H^T dCW`` with ``H[i, j] = dp_j / dCW_i``.
The state-space model is written ``x(k+1) = B u(k)`` with ``B = -H^T``, which
makes the model input ``u`` the CW_min *reduction* ``CW* - CW``. An
integrator ``s(k+1) = s(k) + T_s e(k)`` on the tracking error
``e = r - y`` is appended and the gain for ``z = [x; s]`` comes from the
discrete algebraic Riccati equation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import analytics
from .config import NetworkConfig
from .errors import DimensionError, DomainError, NonConvergence, UncontrollableError

CW_MIN_CLAMP = 1.0
CW_MAX_CLAMP = 1023.0
DARE_TOL = 1e-9
DARE_MAX_ITER = 100_000
JACOBIAN_FP_TOL = 1e-13

# Default weights, found by trial and error.
DEFAULT_STATE_WEIGHT = 1.0
DEFAULT_INTEGRAL_WEIGHT = 50.0
DEFAULT_CONTROL_WEIGHT = 1e-4


@dataclass
class LinearModel:
    H: np.ndarray
    B: np.ndarray
    C: np.ndarray
    operating_cw: np.ndarray
    operating_pfail: np.ndarray
    mask: np.ndarray

    @property
    def N(self) -> int:
        return self.H.shape[0]


def _pfail(cfg: NetworkConfig, cw, tau0=None) -> np.ndarray:
    res = analytics.solve_attempt_fixed_point(cfg, cw, tol=JACOBIAN_FP_TOL, tau0=tau0)
    return analytics.slot_probabilities(cfg, res.tau).p_fail


def jacobian(cfg: NetworkConfig, cw_star, *, tau_star=None, scale: float = 1.0) -> LinearModel:
    """Central-difference linearisation of CW_min -> P^F over populated ACs.

    ``tau_star`` pins the fixed-point branch (pass the optimiser's attempt
    probabilities; small windows can admit several roots). ``scale``
    multiplies the default step ``max(0.01, 1e-4 cw)``; the halving check
    uses ``scale=0.5``.
    """
    mask = cfg.active
    sub = cfg.subset(mask)
    cw = np.asarray(cw_star, dtype=float)[mask]
    if np.any(cw < 1.0 - 1e-6):
        raise DomainError(f"operating CW_min {cw} is not realisable (< 1)")
    # The relation is smooth through CW = 1, so stencils may straddle it.
    steps = scale * np.maximum(0.01, 1e-4 * cw)
    if tau_star is None:
        tau0 = analytics.solve_attempt_fixed_point(sub, cw, tol=JACOBIAN_FP_TOL).tau
    else:
        tau0 = np.asarray(tau_star, dtype=float)[mask]
    N = sub.N
    H = np.empty((N, N))
    for i in range(N):
        h = steps[i]
        up, dn = cw.copy(), cw.copy()
        up[i] += h
        dn[i] -= h
        H[i, :] = (_pfail(sub, up, tau0) - _pfail(sub, dn, tau0)) / (2 * h)
    return LinearModel(H=H, B=-H.T, C=np.eye(N), operating_cw=cw,
                       operating_pfail=_pfail(sub, cw, tau0), mask=mask)


def riccati_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    rhs = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A) + Q
    return float(np.max(np.abs(P - rhs)))


def _check_spd(M, name):
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(M)))):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None


def solve_dare(A, B, Q, R, *, tol: float = DARE_TOL, max_iter: int = DARE_MAX_ITER,
               relative: bool = False) -> np.ndarray:
    """Solve P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q.

    Runs the Riccati recursion from P = Q in its doubling form: iterate k
    equals recursion step 2^k - 1, so integrator-augmented systems (slow
    under the plain recursion) converge in a few dozen doublings.
    ``max_iter`` bounds the equivalent number of plain recursion steps.
    With ``relative`` the residual tolerance is scaled by ``max(1, max|P|)``,
    which is what double precision allows for badly scaled weights.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    n, m = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (m, m):
        raise DimensionError(f"inconsistent shapes A{A.shape} B{B.shape} Q{Q.shape} R{R.shape}")
    _check_spd(Q, "Q")
    _check_spd(R, "R")
    I = np.eye(n)
    Ak, Gk, Pk = A.copy(), B @ np.linalg.solve(R, B.T), Q.copy()
    steps, residual = 1, np.inf
    while steps <= max_iter:
        W = np.linalg.inv(I + Gk @ Pk)
        nxt = Pk + Ak.T @ Pk @ W @ Ak
        Gk = Gk + Ak @ W @ Gk @ Ak.T
        Ak = Ak @ W @ Ak
        nxt = 0.5 * (nxt + nxt.T)
        Gk = 0.5 * (Gk + Gk.T)
        change = float(np.max(np.abs(nxt - Pk)))
        Pk = nxt
        steps *= 2
        if not np.isfinite(change) or change < 1e-3 * tol * max(1.0, float(np.max(np.abs(Pk)))):
            break
    if not np.all(np.isfinite(Pk)):
        raise NonConvergence("Riccati iteration diverged", np.inf, steps)
    residual = riccati_residual(A, B, Q, R, Pk)
    if relative:
        residual /= max(1.0, float(np.max(np.abs(Pk))))
    if residual >= tol:
        raise NonConvergence("Riccati iteration did not reach tolerance", residual, steps)
    return Pk


def augmented_system(model: LinearModel, T_s: float):
    N = model.N
    A = np.zeros((2 * N, 2 * N))
    A[N:, :N] = -T_s * model.C
    A[N:, N:] = np.eye(N)
    B = np.zeros((2 * N, N))
    B[:N] = model.B
    return A, B


def is_controllable(A, B, tol=1e-9) -> bool:
    """Rank test on [B, AB, ...] with each block scaled to unit norm."""
    n = A.shape[0]
    blocks, M = [], B
    for _ in range(n):
        scale = np.max(np.abs(M))
        if scale > 0:
            blocks.append(M / scale)
        M = A @ M
    if not blocks:
        return False
    s = np.linalg.svd(np.hstack(blocks), compute_uv=False)
    return bool(np.sum(s > tol * s[0]) >= n)


def default_weights(N: int, state=DEFAULT_STATE_WEIGHT, integral=DEFAULT_INTEGRAL_WEIGHT,
                    control=DEFAULT_CONTROL_WEIGHT):
    Q = np.diag(np.concatenate([np.full(N, state), np.full(N, integral)]))
    R = control * np.eye(N)
    return Q, R


@dataclass
class ControllerState:
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    T_s: float
    reference: np.ndarray
    operating_cw: np.ndarray
    integrator: np.ndarray
    last_measurement: np.ndarray
    last_error: np.ndarray
    saturated: np.ndarray
    k: int = 0
    log: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.K.shape[0]


def lqi_gain(model: LinearModel, Q=None, R=None, T_s: float = 100_000.0) -> ControllerState:
    N = model.N
    if Q is None or R is None:
        Qd, Rd = default_weights(N)
        Q = Qd if Q is None else Q
        R = Rd if R is None else R
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if Q.shape != (2 * N, 2 * N) or R.shape != (N, N):
        raise DimensionError(f"Q must be {2 * N}x{2 * N} and R {N}x{N}")
    A_aug, B_aug = augmented_system(model, T_s)
    if not np.any(model.H) or not is_controllable(A_aug, B_aug):
        raise UncontrollableError("CW_min has no (or rank-deficient) influence on the failure probabilities")
    P = solve_dare(A_aug, B_aug, Q, R, relative=True)
    BtP = B_aug.T @ P
    K = np.linalg.solve(R + BtP @ B_aug, BtP @ A_aug)
    ref = np.asarray(model.operating_pfail, dtype=float).copy()
    return ControllerState(
        K=K, Q=Q, R=R, P=P, T_s=float(T_s), reference=ref,
        operating_cw=np.asarray(model.operating_cw, dtype=float).copy(),
        integrator=np.zeros(N), last_measurement=ref.copy(), last_error=np.zeros(N),
        saturated=np.zeros(N, dtype=bool),
    )


def closed_loop_matrix(state: ControllerState, model: LinearModel) -> np.ndarray:
    A_aug, B_aug = augmented_system(model, state.T_s)
    return A_aug - B_aug @ state.K


def step(state: ControllerState, model: LinearModel, measured_pfail) -> np.ndarray:
    """One beacon update: returns the CW_min to apply during the next interval.

    Absent measurements (``None`` or NaN) hold the previous value. The
    integrator takes the previous interval's error, and stops on channels
    whose output was clamped at the last update.
    """
    y = np.array([np.nan if v is None else float(v) for v in measured_pfail], dtype=float)
    if y.shape != (state.N,):
        raise DimensionError(f"expected {state.N} measurements, got {y.shape}")
    y = np.where(np.isfinite(y), y, state.last_measurement)
    state.last_measurement = y
    if state.k > 0:
        state.integrator = state.integrator + np.where(state.saturated, 0.0, state.T_s * state.last_error)
    e = state.reference - y
    dx = y - state.reference
    u = -state.K @ np.concatenate([dx, state.integrator])
    raw = state.operating_cw - u
    cw = np.clip(raw, CW_MIN_CLAMP, CW_MAX_CLAMP)
    state.saturated = cw != raw
    state.last_error = e
    state.log.append({"k": state.k, "measured": y.copy(), "error": e.copy(),
                      "integrator": state.integrator.copy(), "cw": cw.copy()})
    state.k += 1
    return cw


class AnalyticPlant:
    """Noise-free plant: CW_min over the populated ACs -> analytic P^F.

    The tau / CW_min relation can have several roots at small windows. The
    plant is quasi-static: each call continues the root from the previous
    window to the new one, so it stays on one branch unless that branch
    folds. ``cw0``/``tau0`` give the initial state (default: the root reached
    from large windows at the first call).
    """

    def __init__(self, cfg: NetworkConfig, mask=None, cw0=None, tau0=None):
        self.mask = cfg.active if mask is None else np.asarray(mask, dtype=bool)
        self.cfg = cfg.subset(self.mask)
        self.cw = None if cw0 is None else np.asarray(cw0, dtype=float)
        self.tau = None if tau0 is None else np.asarray(tau0, dtype=float)

    def __call__(self, cw) -> np.ndarray:
        cw = np.asarray(cw, dtype=float)
        if self.cw is not None and self.tau is not None and np.array_equal(cw, self.cw):
            return analytics.slot_probabilities(self.cfg, self.tau).p_fail
        out = None
        if self.tau is not None:
            start = self.cw if self.cw is not None else cw
            out = analytics.continue_fixed_point(self.cfg, start, self.tau, cw, tol=JACOBIAN_FP_TOL)
        tau = out[0] if out else analytics.solve_attempt_fixed_point(
            self.cfg, cw, tol=JACOBIAN_FP_TOL).tau
        self.cw, self.tau = cw, tau
        return analytics.slot_probabilities(self.cfg, tau).p_fail


def analytic_plant(cfg: NetworkConfig, mask=None, cw0=None, tau0=None) -> AnalyticPlant:
    return AnalyticPlant(cfg, mask, cw0, tau0)
