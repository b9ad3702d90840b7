import csv
import json

import numpy as np
import pytest

from mmsmpc import socp
from mmsmpc.estimation import GammaBelief
from mmsmpc.models import ContractError, LongitudinalParams, longitudinal_instance
from mmsmpc.prediction import build_mode_stacks
from mmsmpc.sim import (ScenarioConfig, SimLog, batch_grid, evaluate_success, grid_initial_conditions,
                        noise_sequences, run_closed_loop, summary, true_gamma_path, true_tv_control)

ZERO = LongitudinalParams(Sigma_w=(0.0, 0.0), Sigma_v=(0.0, 0.0), Sigma_n=0.0)


def test_true_tv_control_examples(stop_sign):
    assert true_tv_control(stop_sign, [1.0, 2.0], [43.0, 0.0], [1.3], 1).item() == 0.0
    assert true_tv_control(stop_sign, [20.0, 5.0], [10.0, 5.0], [1.0], 2).item() == pytest.approx(0.03)
    assert true_tv_control(stop_sign, [20.0, 5.0], [10.0, 8.0], [0.0], 2).item() == 0.0


def test_config_round_trip():
    cfg = ScenarioConfig(sigma=2, seed=7, params=LongitudinalParams(N=6), x0=(1.0, 2.0))
    assert ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert ScenarioConfig.from_dict({}) == ScenarioConfig()
    for bad in ({"sigma": 3}, {"T": 0}, {"variant": "x"}, {"fallback": "x"}, {"nope": 1},
                {"params": {"nope": 1}}):
        with pytest.raises(ContractError):
            ScenarioConfig.from_dict(bad)


def test_noise_is_seeded():
    a, b = noise_sequences(ScenarioConfig(seed=3)), noise_sequences(ScenarioConfig(seed=3))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    c = noise_sequences(ScenarioConfig(seed=4))
    assert not np.array_equal(a[0], c[0])


def test_single_step_run():
    cfg = ScenarioConfig(T=1)
    lg = run_closed_loop(cfg)
    assert lg.T == 1 and len(lg.status) == 1
    assert lg.x.shape == (2, 2) and lg.gamma.shape == (2, 1)


def test_deterministic_and_logged_gamma():
    cfg = ScenarioConfig(T=6, seed=11, sigma=2)
    a, b = run_closed_loop(cfg), run_closed_loop(cfg)
    for name in ("x", "o", "u", "gamma", "gamma_hat", "gamma_cov", "mode_probs", "fallback", "margin"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.status == b.status
    np.testing.assert_array_equal(a.gamma, true_gamma_path(cfg))
    # the walk draws come from the same generator as the logged path
    _, _, n = noise_sequences(cfg)
    np.testing.assert_allclose(np.diff(a.gamma[:, 0]), n[:, 0], atol=1e-14)
    frozen = run_closed_loop(ScenarioConfig(T=3, walk_gamma=False, gamma0=0.7))
    np.testing.assert_array_equal(frozen.gamma, 0.7)


def test_fallback_flag_matches_status():
    lg = run_closed_loop(ScenarioConfig(T=8))
    flags = np.array([s != socp.OPTIMAL for s in lg.status])
    np.testing.assert_array_equal(lg.fallback, flags)
    # a held input repeats the previous one
    for t in np.flatnonzero(lg.fallback):
        np.testing.assert_array_equal(lg.u[t], lg.u[t - 1] if t > 0 else np.zeros(1))


@pytest.mark.parametrize("sigma", [1, 2])
def test_model_match_without_noise(sigma):
    cfg = ScenarioConfig(params=ZERO, sigma=sigma, variant="no_kf", walk_gamma=False, gamma0=1.0,
                         gamma_hat0=1.0, Sigma0=0.0, T=15)
    lg = run_closed_loop(cfg)
    inst = longitudinal_instance(ZERO)
    j = sigma - 1
    checked = 0
    for t in range(cfg.T):
        if lg.fallback[t]:
            continue
        bel = [GammaBelief(lg.gamma_hat[t, m], lg.gamma_cov[t, m]) for m in range(2)]
        st = build_mode_stacks(inst, lg.x[t], lg.o[t], bel, use_kf=False, t=t)[j]
        h = np.zeros(inst.N)
        h[0] = lg.u[t, 0]
        x, o, _ = st.predict(lg.x[t], lg.o[t], lg.gamma_hat[t, j], h)
        np.testing.assert_allclose(x[2:4], lg.x[t + 1], atol=1e-6)
        np.testing.assert_allclose(o[2:4], lg.o[t + 1], atol=1e-6)
        checked += 1
    assert checked > 0
    np.testing.assert_allclose(lg.gamma_hat[:, j], 1.0, atol=1e-6)


def _fake_log(T=4, margin=1.0, status="optimal", x_T=(50.0, 0.0), o_T=(43.0, 0.0)):
    x = np.zeros((T + 1, 2))
    x[-1] = x_T
    o = np.zeros((T + 1, 2))
    o[-1] = o_T
    return SimLog(x, o, np.zeros((T, 1)), np.ones((T + 1, 1)), np.zeros((T, 2, 1)), np.zeros((T, 2, 1, 1)),
                  np.full((T, 2), 0.5), [status] * T, np.zeros(T, bool), np.full(T + 1, margin))


def test_evaluate_success():
    cfg1, cfg2 = ScenarioConfig(sigma=1), ScenarioConfig(sigma=2)
    assert evaluate_success(_fake_log(), cfg1) == (True, 1.0)
    assert evaluate_success(_fake_log(), cfg2) == (True, 1.0)
    lg = _fake_log()
    lg.margin[2] = -0.5
    assert evaluate_success(lg, cfg1)[0] is False
    assert evaluate_success(_fake_log(x_T=(48.5, 0.0)), cfg1)[0] is False
    assert evaluate_success(_fake_log(x_T=(50.0, 0.2)), cfg1)[0] is False
    # sigma = 2 also needs the TV at rest d_safe behind
    assert evaluate_success(_fake_log(o_T=(40.0, 0.0)), cfg1)[0] is True
    assert evaluate_success(_fake_log(o_T=(40.0, 0.0)), cfg2)[0] is False
    lg = _fake_log()
    lg.status[1] = "infeasible"
    assert evaluate_success(lg, cfg1)[1] == pytest.approx(0.75)


def test_grid_corners():
    ics = grid_initial_conditions()
    assert len(ics) == 16 and len(set(ics)) == 16
    xs = np.array([x for x, _ in ics])
    os_ = np.array([o for _, o in ics])
    np.testing.assert_allclose(xs.mean(0), [0, 11])
    np.testing.assert_allclose(os_.mean(0), [-9, 14])


def test_one_cell_grid_equals_single_run():
    base = ScenarioConfig(T=3, seed=5)
    ic = [((0.5, 11.0), (-9.0, 14.5))]
    table = batch_grid(base, variants=["full"], sigmas=(2,), initial_conditions=ic, workers=1)
    cfg = ScenarioConfig(T=3, seed=5, sigma=2, x0=ic[0][0], o0=ic[0][1])
    ok, feas = evaluate_success(run_closed_loop(cfg), cfg)
    assert table == [dict(variant="full", sigma=2, S_pct=100.0 * ok, F_pct=100.0 * feas)]


def test_parallel_grid_matches_serial():
    base = ScenarioConfig(T=2)
    ics = grid_initial_conditions()[:3]
    kw = dict(variants=["full", "open_loop"], sigmas=(1,), initial_conditions=ics)
    assert batch_grid(base, workers=1, **kw) == batch_grid(base, workers=2, **kw)


def test_csv_and_json_outputs(tmp_path):
    cfg = ScenarioConfig(T=3)
    lg = run_closed_loop(cfg)
    lg.write_csv(tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x0", "x1", "o0", "o1", "u0", "gamma0", "gamma_hat_m1_0", "gamma_var_m1_0",
                       "gamma_hat_m2_0", "gamma_var_m2_0", "p_m1", "p_m2", "status", "fallback", "margin"]
    assert len(rows) == 1 + cfg.T
    assert float(rows[1][2]) == lg.x[0, 1]
    js = lg.to_json()
    assert len(js["steps"]) == cfg.T and js["final"]["x"] == lg.x[-1].tolist()
    s = summary(lg, cfg)
    assert json.loads(json.dumps(s)) == s


@pytest.mark.slow
def test_zero_noise_stop_with_recovery():
    # under the default hold fallback the EV reverses after the horizon-limited
    # braking becomes infeasible; the recovery fallback lets it settle at the line
    cfg = ScenarioConfig(params=ZERO, sigma=1, walk_gamma=False, fallback="recover")
    lg = run_closed_loop(cfg)
    s_T, v_T = lg.x[-1]
    assert 50.0 - 1.0 <= s_T <= 50.0 + 1e-6
    assert abs(v_T) <= 0.1
    assert lg.margin.min() >= -1e-6
