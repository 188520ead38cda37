import math

import numpy as np
import pytest

from edcapf import analytics, optimizer
from edcapf.config import AcClass, NetworkConfig
from edcapf.errors import DomainError, Infeasible

from conftest import fig2_config, single


def loose(cfg):
    for c in cfg.classes:
        cfg = cfg.replace_class(c.name, d=math.inf)
    return cfg


def test_utility_single_class_is_log_throughput():
    cfg = single(n=1)
    for tau in (0.05, 0.3):
        assert optimizer.utility(cfg, [tau]) == pytest.approx(math.log(analytics.throughput(cfg, [tau])[0]))


def test_utility_symmetric_under_swap():
    classes = tuple(AcClass(f"A{i}", 2, 0.01, 54.0, 2) for i in range(2))
    cfg = NetworkConfig(classes)
    assert optimizer.utility(cfg, [0.1, 0.2]) == pytest.approx(optimizer.utility(cfg, [0.2, 0.1]), rel=1e-14)


def test_utility_matches_direct_evaluation(rng):
    cfg = fig2_config(p_vi=0.01)
    tau = rng.uniform(0.01, 0.3, 4)
    s = analytics.throughput(cfg, tau)
    assert optimizer.utility(cfg, tau) == pytest.approx(np.sum(np.log(s)), rel=1e-14)


def test_utility_undefined_at_zero_throughput():
    with pytest.raises(DomainError):
        optimizer.utility(fig2_config(), [0.0, 0.1, 0.1, 0.1])


def test_identical_classes_share_tau():
    classes = tuple(AcClass(f"A{i}", 1, 0.001, 54.0, 2, M=2) for i in range(3))
    pt = optimizer.solve(NetworkConfig(classes))
    np.testing.assert_allclose(pt.tau_star, pt.tau_star[0], rtol=1e-6)


def test_single_class_matches_line_search():
    cfg = single(n=2, p=0.001)
    pt = optimizer.solve(cfg)
    grid = np.arange(1, 10_000) * 1e-4
    U = 2 * np.log(analytics.throughput(cfg, grid[:, None])[:, 0])
    assert pt.tau_star[0] == pytest.approx(grid[np.argmax(U)], abs=1e-3)


def test_kkt_at_unconstrained_symmetric_optimum():
    classes = tuple(AcClass(f"A{i}", 1, 0.0, 54.0, 2) for i in range(2))
    cfg = NetworkConfig(classes)
    pt = optimizer.solve(cfg)
    br = optimizer.kkt_breakdown(cfg, pt)
    assert br["stationarity"] < 1e-4
    assert np.all(pt.multipliers == 0)
    # slack constraints: KKT reduces to stationarity of U
    assert br["complementary_slackness"] == 0.0
    assert pt.kkt_residual == pytest.approx(br["stationarity"])


def test_kkt_residual_grows_off_optimum():
    cfg = fig2_config(p_vi=0.01)
    pt = optimizer.solve(cfg)
    base = optimizer.kkt_residual(cfg, pt)
    for i in range(4):
        moved = pt.tau_star.copy()
        moved[i] += 0.01
        other = optimizer.OperatingPoint(**{**pt.__dict__, "tau_star": moved})
        assert optimizer.kkt_residual(cfg, other) > base


def test_operating_point_consistency():
    cfg = fig2_config(p_vi=0.01)
    pt = optimizer.solve(cfg)
    np.testing.assert_allclose(pt.cw_min_star, analytics.cwmin_from_tau(cfg, pt.tau_star, check=False))
    np.testing.assert_allclose(pt.p_fail_star, analytics.slot_probabilities(cfg, pt.tau_star).p_fail)
    assert np.all(pt.delays <= pt.deadlines * (1 + 1e-6))
    assert np.all(pt.multipliers >= 0)
    assert np.all(np.abs(pt.multipliers * (pt.deadlines - pt.delays)) / pt.deadlines <= 1e-6)


def test_throughput_scaling_keeps_argmax():
    # doubling L and every rate keeps every duration and doubles every s_i
    classes = (AcClass("A", 1, 0.001, 54.0, 2, M=2), AcClass("B", 2, 0.01, 36.0, 3))
    cfg = NetworkConfig(classes)
    big = NetworkConfig(tuple(AcClass(c.name, c.n, c.p, 2 * c.r, c.t, c.M) for c in classes), L=16000)
    a, b = optimizer.solve(cfg), optimizer.solve(big)
    np.testing.assert_allclose(a.tau_star, b.tau_star, atol=1e-6)
    assert b.utility - a.utility == pytest.approx(3 * math.log(2), abs=1e-9)


def test_tightening_never_raises_utility():
    classes = (AcClass("A", 1, 0.001, 54.0, 2, M=3), AcClass("B", 2, 0.01, 36.0, 3))
    cfg = NetworkConfig(classes)
    free = optimizer.solve(cfg)
    utilities = []
    for frac in (1.2, 1.0, 0.98, 0.96, 0.94):
        c = cfg.replace_class("A", d=float(free.delays[0] * frac))
        utilities.append(optimizer.solve(c).utility)
    assert np.all(np.diff(utilities) <= 1e-9)


def test_infeasible_deadlines():
    cfg = fig2_config().replace_class("VO", d=1.0)
    with pytest.raises(Infeasible) as exc:
        optimizer.solve(cfg)
    assert exc.value.probe["best_ratio"] > 1


def test_empty_classes_are_ignored():
    cfg = fig2_config(p_vi=0.01).replace_class("VO", n=0)
    pt = optimizer.solve(cfg)
    assert pt.tau_star[3] == 0.0
    assert pt.throughputs[3] == 0.0
    assert np.isnan(pt.delays[3])


def test_cw_floor_is_respected():
    cfg = fig2_config(p_vi=0.01)
    free = optimizer.solve(cfg)
    floor = float(np.min(free.cw_min_star)) + 1.0
    pt = optimizer.solve(cfg, cw_floor=floor)
    assert np.all(pt.cw_min_star >= floor * (1 - 1e-6))
    assert pt.utility <= free.utility + 1e-9
    assert pt.kkt_residual < 1e-3


def test_richardson_gap_detects_bad_gradient():
    f = lambda x: np.sum(np.abs(x), axis=-1)
    assert optimizer.richardson_gap(lambda x: np.sum(x ** 2, axis=-1), np.array([0.3, -1.0])) < 1e-6
    assert optimizer.richardson_gap(f, np.array([1e-7, 1.0])) > 1e-3
