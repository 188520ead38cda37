import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from edcapf import analytics, control, optimizer
from edcapf.errors import DimensionError, DomainError, UncontrollableError

from conftest import fig2_config, fig4_config, single


def spd(rng, n):
    X = rng.normal(size=(n, n))
    return X @ X.T + n * np.eye(n)


def scalar_model(h=-0.01, cw=15.0, pf=0.1):
    H = np.array([[h]])
    return control.LinearModel(H=H, B=-H.T, C=np.eye(1), operating_cw=np.array([cw]),
                               operating_pfail=np.array([pf]), mask=np.array([True]))


# Jacobian


def test_jacobian_zero_without_failures():
    model = control.jacobian(single(n=1, p=0.0), [15.0])
    np.testing.assert_array_equal(model.H, [[0.0]])


def test_jacobian_negative_for_contention():
    model = control.jacobian(single(n=2, p=0.0), [15.0])
    assert model.H[0, 0] < 0


def test_jacobian_structure():
    cfg = fig2_config(p_vi=0.01)
    pt = optimizer.solve(cfg)
    model = control.jacobian(cfg, pt.cw_min_star, tau_star=pt.tau_star)
    np.testing.assert_array_equal(model.B, -model.H.T)
    np.testing.assert_array_equal(model.C, np.eye(4))
    np.testing.assert_allclose(model.operating_pfail, pt.p_fail_star, atol=1e-9)


def test_jacobian_rejects_unrealisable_window():
    with pytest.raises(DomainError):
        control.jacobian(single(n=2), [0.5])


def test_jacobian_skips_empty_classes():
    cfg = fig4_config({"BK": 1, "BE": 2, "VI": 0, "VO": 0})
    model = control.jacobian(cfg, [15.0, 15.0, 15.0, 15.0])
    assert model.H.shape == (2, 2)
    np.testing.assert_array_equal(model.mask, [True, True, False, False])


def test_linearisation_remainder_is_quadratic(rng):
    cfg = fig2_config(p_vi=0.01).with_cw([31, 15, 15, 7])
    cw0 = cfg.cw_min
    model = control.jacobian(cfg, cw0)
    p0 = model.operating_pfail
    for _ in range(5):
        u = rng.normal(size=4)
        u /= np.linalg.norm(u)
        ratios = []
        for eps in (0.4, 0.2, 0.1):
            delta = eps * u
            p = analytics.pfail_from_cwmin(cfg, cw0 + delta)
            ratios.append(np.max(np.abs(p - p0 - delta @ model.H)) / eps ** 2)
        # remainder / |delta|^2 stays bounded as delta shrinks
        assert max(ratios) < 2 * min(ratios) + 1e-6


# DARE


def test_dare_scalar_golden():
    P = control.solve_dare(1.0, 1.0, 1.0, 1.0)
    assert P[0, 0] == pytest.approx((1 + 5 ** 0.5) / 2, abs=1e-8)


def test_dare_no_control_zero_dynamics():
    Q = np.diag([2.0, 3.0])
    P = control.solve_dare(np.zeros((2, 2)), np.zeros((2, 1)), Q, np.eye(1))
    np.testing.assert_array_equal(P, Q)


def test_dare_matches_scipy(rng):
    for _ in range(5):
        A = rng.normal(size=(4, 4))
        A *= 0.9 / max(abs(np.linalg.eigvals(A)))
        B = rng.normal(size=(4, 2))
        Q, R = spd(rng, 4), spd(rng, 2)
        P = control.solve_dare(A, B, Q, R)
        np.testing.assert_allclose(P, solve_discrete_are(A, B, Q, R), rtol=1e-9, atol=1e-9)


def test_dare_dimension_checks():
    with pytest.raises(DimensionError):
        control.solve_dare(np.eye(2), np.ones((3, 1)), np.eye(2), np.eye(1))
    with pytest.raises(ValueError):
        control.solve_dare(np.eye(2), np.ones((2, 1)), -np.eye(2), np.eye(1))


def test_augmented_system_integrates_error():
    A, B = control.augmented_system(scalar_model(), 100_000.0)
    np.testing.assert_array_equal(A, [[0, 0], [-1e5, 1]])
    np.testing.assert_array_equal(B, [[0.01], [0]])


# gain synthesis


def test_zero_input_map_is_uncontrollable():
    with pytest.raises(UncontrollableError):
        control.lqi_gain(scalar_model(h=0.0))


def test_scalar_closed_loop_stable():
    model = scalar_model()
    state = control.lqi_gain(model, np.eye(2), np.eye(1), T_s=1.0)
    assert state.K.shape == (1, 2)
    assert max(abs(np.linalg.eigvals(control.closed_loop_matrix(state, model)))) < 1


def test_default_gain_dimensions_and_stability():
    cfg = fig2_config(p_vi=0.01)
    pt = optimizer.solve(cfg)
    model = control.jacobian(cfg, pt.cw_min_star, tau_star=pt.tau_star)
    state = control.lqi_gain(model, T_s=cfg.beacon)
    assert state.K.shape == (4, 8)
    assert max(abs(np.linalg.eigvals(control.closed_loop_matrix(state, model)))) < 1
    np.testing.assert_allclose(state.P, state.P.T, atol=1e-12 * np.max(np.abs(state.P)))


def test_heavier_control_penalty_shrinks_gain():
    model = scalar_model()
    norms = [np.linalg.norm(control.lqi_gain(model, np.eye(2), r * np.eye(1), T_s=1.0).K)
             for r in (0.25, 0.5, 1.0, 2.0, 4.0)]
    assert np.all(np.diff(norms) <= 1e-12)


# controller step


def test_step_at_reference_returns_operating_point():
    model = scalar_model()
    state = control.lqi_gain(model, np.eye(2), np.eye(1), T_s=1.0)
    cw = control.step(state, model, [0.1])
    np.testing.assert_allclose(cw, [15.0])


def test_integrator_grows_linearly_with_persistent_error():
    model = scalar_model()
    state = control.lqi_gain(model, np.eye(2), np.eye(1), T_s=1.0)
    values = []
    for _ in range(5):
        control.step(state, model, [0.05])
        values.append(state.integrator[0])
    np.testing.assert_allclose(np.diff(values), 0.05)


def test_anti_windup_and_clamp():
    model = scalar_model()
    state = control.lqi_gain(model, np.eye(2), np.eye(1), T_s=1.0)
    state.K = np.array([[1e5, 1.0]])
    cw = control.step(state, model, [0.9])
    assert cw[0] in (control.CW_MIN_CLAMP, control.CW_MAX_CLAMP)
    frozen = state.integrator.copy()
    control.step(state, model, [0.9])
    np.testing.assert_array_equal(state.integrator, frozen)


def test_absent_measurement_holds_last_value():
    model = scalar_model()
    a = control.lqi_gain(model, np.eye(2), np.eye(1), T_s=1.0)
    b = control.lqi_gain(model, np.eye(2), np.eye(1), T_s=1.0)
    control.step(a, model, [0.12])
    control.step(b, model, [0.12])
    np.testing.assert_array_equal(control.step(a, model, [None]), control.step(b, model, [0.12]))


def test_deviation_invariance():
    model = scalar_model()
    shifted = scalar_model(pf=0.3)
    a = control.lqi_gain(model, np.eye(2), np.eye(1), T_s=1.0)
    b = control.lqi_gain(shifted, np.eye(2), np.eye(1), T_s=1.0)
    for y in (0.12, 0.08, 0.1, 0.11):
        np.testing.assert_allclose(control.step(a, model, [y]), control.step(b, shifted, [y + 0.2]),
                                   rtol=1e-12)


def test_step_logs_each_update():
    model = scalar_model()
    state = control.lqi_gain(model, np.eye(2), np.eye(1), T_s=1.0)
    control.step(state, model, [0.1])
    control.step(state, model, [0.2])
    assert [r["k"] for r in state.log] == [0, 1]
    assert set(state.log[0]) == {"k", "measured", "error", "integrator", "cw"}


def test_local_convergence_against_analytic_plant():
    cfg = fig2_config(p_vi=0.01)
    pt = optimizer.solve(cfg, cw_floor=1.0)
    model = control.jacobian(cfg, pt.cw_min_star, tau_star=pt.tau_star)
    state = control.lqi_gain(model, T_s=cfg.beacon)
    plant = control.AnalyticPlant(cfg, cw0=pt.cw_min_star, tau0=pt.tau_star)
    cw = pt.cw_min_star * np.array([1.05, 0.95, 1.03, 0.97])
    err = []
    for _ in range(200):
        pf = plant(cw)
        err.append(np.max(np.abs(pf - pt.p_fail_star)))
        cw = control.step(state, model, pf)
    assert err[0] > 1e-3
    assert err[-1] < 1e-6
