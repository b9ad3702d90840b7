import numpy as np
import pytest

from mmsmpc.models import (ContractError, EvModel, LongitudinalParams, ScenarioInstance, TvModel,
                           ev_step, fd_feature_jacobians, gamma_step, longitudinal_instance, tv_step)


def test_ev_step_examples(stop_sign):
    ev = stop_sign.ev
    np.testing.assert_allclose(ev_step(ev, 0, [0, 11], [0], [0, 0]), [1.1, 11])
    np.testing.assert_allclose(ev_step(ev, 0, [0, 0], [0], [0, 0]), [0, 0])
    np.testing.assert_allclose(ev_step(ev, 0, [1, 2], [1], [0.1, 0]), [1.3, 2.1])


def test_ev_step_rejects_bad_shapes(stop_sign):
    with pytest.raises(ContractError):
        ev_step(stop_sign.ev, 0, [0, 1, 2], [0], [0, 0])
    with pytest.raises(ContractError):
        ev_step(stop_sign.ev, 0, [0, 1], [np.nan], [0, 0])


def test_tv_step_zero_weight(stop_sign, rng):
    o = rng.normal(size=2)
    for j in range(2):
        np.testing.assert_allclose(tv_step(stop_sign.tv, j, 0, [3, 4], o, [0.0], [0, 0]), stop_sign.tv.Abar(0) @ o)


def test_tv_step_stop_equilibrium(stop_sign):
    o = np.array([43.0, 0.0])
    np.testing.assert_allclose(tv_step(stop_sign.tv, 0, 0, [5, 1], o, [2.7], [0, 0]), stop_sign.tv.Abar(0) @ o)


def test_tv_step_follow_speed_increment(stop_sign):
    o = np.array([10.0, 5.0])
    o1 = tv_step(stop_sign.tv, 1, 0, [20, 5], o, [1.0], [0, 0])
    assert o1[1] - o[1] == pytest.approx(0.003, abs=1e-12)


def test_tv_step_bad_mode(stop_sign):
    with pytest.raises(ContractError):
        tv_step(stop_sign.tv, 2, 0, [0, 0], [0, 0], [1.0], [0, 0])


@pytest.mark.parametrize("g, n, out", [(1.0, 0.0, 1.0), (0.0, 0.3, 0.3), (1.5, -0.2, 1.3)])
def test_gamma_step(g, n, out):
    assert gamma_step(g, n) == pytest.approx(out)


def test_default_instance_dimensions(stop_sign):
    c = stop_sign.constraints
    assert (c.n_xu, c.n_c, stop_sign.tv.M, stop_sign.tv.n_gamma) == (5, 1, 2, 1)
    assert stop_sign.N == 12 and stop_sign.epsilon == 0.1
    np.testing.assert_allclose(stop_sign.Cx, np.diag([50, 20]))
    np.testing.assert_allclose(stop_sign.Cu, [[10]])
    np.testing.assert_allclose(stop_sign.ev.Sigma_w, np.diag([1e-3, 1e-2]))
    np.testing.assert_allclose(stop_sign.tv.Sigma_v, np.diag([1e-2, 1e-1]))
    np.testing.assert_allclose(stop_sign.tv.Sigma_n, [[0.5]])
    np.testing.assert_allclose(c.f, [50, 14, 0, 3.5, 6])


def test_features(stop_sign, rng):
    stop, follow = stop_sign.tv.mode(0), stop_sign.tv.mode(1)
    assert stop.features(rng.normal(size=2), [43.0, 0.0]).item() == 0.0
    jac = follow.jacobians([1, 2], [3, 4])
    np.testing.assert_allclose(jac[0, 0], [1e-2, 1.0, -1e-2, -1.0])
    # analytic gradients agree with finite differences
    for m in (stop, follow):
        x, o = rng.normal(size=2) * 10, rng.normal(size=2) * 10
        np.testing.assert_allclose(m.jacobians(x, o), fd_feature_jacobians(m.features, x, o), atol=1e-6)


def test_params_round_trip():
    p = LongitudinalParams(N=8, Sigma_w=(0.0, 0.0))
    assert LongitudinalParams.from_dict(p.to_dict()) == p
    with pytest.raises(ContractError):
        LongitudinalParams.from_dict({"bogus": 1})


def test_instance_contracts(stop_sign):
    from dataclasses import replace
    with pytest.raises(ContractError):
        replace(stop_sign, epsilon=0.0)
    with pytest.raises(ContractError):
        replace(stop_sign, epsilon=0.9)  # above min(n_xu, n_c) / 2
    with pytest.raises(ContractError):
        replace(stop_sign, Cx=np.diag([1.0, 0.0]))
    with pytest.raises(ContractError):
        replace(stop_sign, N=0)
    with pytest.raises(ContractError):
        EvModel(np.eye(2), np.ones((2, 1)), -np.eye(2))
    with pytest.raises(ContractError):
        longitudinal_instance(LongitudinalParams(dt=0.0))
