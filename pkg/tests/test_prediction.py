from dataclasses import replace

import numpy as np
import pytest

from mmsmpc.estimation import GammaBelief
from mmsmpc.models import ContractError
from mmsmpc.prediction import (Reference, assemble_stacked, build_mode_stacks, horizon_gain_schedule,
                               joint_noise_cov, joint_noise_sqrt, linearize, reference_rollout,
                               shifted_inputs, simulate_linearized, stack_blockdiag, stack_input,
                               stack_transition)
from mmsmpc.validation import (batch_recursion, check_stack_montecarlo, random_instance, random_policy,
                               random_psd, random_schedule, split_xi)


def test_stack_examples(rng):
    A = rng.normal(size=(2, 2))
    np.testing.assert_allclose(stack_transition([A]), np.vstack([np.eye(2), A]))
    B = rng.normal(size=(2, 1))
    MB = stack_input([np.eye(2)] * 2, [B] * 2)
    Z = np.zeros((2, 1))
    np.testing.assert_allclose(MB, np.block([[Z, Z], [B, Z], [B, B]]))
    np.testing.assert_allclose(stack_blockdiag([A]), A)
    with pytest.raises(ContractError):
        stack_input([np.eye(2)], [B, B])


def test_stack_transition_products(rng):
    As = rng.normal(size=(3, 2, 2))
    M = stack_transition(As)
    np.testing.assert_allclose(M[6:8], As[2] @ As[1] @ As[0])


def test_shifted_inputs():
    np.testing.assert_allclose(shifted_inputs(None, 3, 1), np.zeros((3, 1)))
    np.testing.assert_allclose(shifted_inputs([1.0, 2.0, 3.0], 3, 1).ravel(), [2, 3, 3])


def test_reference_rollout_zero_weight(stop_sign):
    x_t, o_t = np.array([0.0, 11.0]), np.array([-9.0, 15.0])
    refs = reference_rollout(stop_sign, x_t, o_t, [np.zeros(1)] * 2)
    for ref in refs:
        for k in range(stop_sign.N):
            np.testing.assert_allclose(ref.obar[k + 1], stop_sign.tv.Abar(k) @ ref.obar[k])
        np.testing.assert_allclose(ref.ubar, 0)


def test_reference_rollout_constant_under_identity(rng):
    inst = random_instance(rng)
    inst = replace(inst, ev=replace(inst.ev, A_seq=np.eye(2)))
    x_t = rng.normal(size=2)
    ref = reference_rollout(inst, x_t, rng.normal(size=2), [np.zeros(2)] * 2)[0]
    np.testing.assert_allclose(ref.xbar, np.tile(x_t, (inst.N + 1, 1)))


def test_reference_rollout_replays_previous_nominal(stop_sign):
    # when the previous plan equals its own reference inputs, the nominal
    # prediction is the reference, and the next rollout is that reference shifted
    x_t, o_t = np.array([0.0, 11.0]), np.array([-20.0, 11.0])
    gh = [np.array([1.0])] * 2
    h = np.linspace(-1, 1, stop_sign.N)
    refs = reference_rollout(stop_sign, x_t, o_t, gh, np.r_[0.0, h])
    beliefs = [GammaBelief([1.0], [[0.0]])] * 2
    stacks = build_mode_stacks(stop_sign, x_t, o_t, beliefs, prev_h=np.r_[0.0, h])
    for j, st in enumerate(stacks):
        x, o, _ = st.predict(x_t, o_t, gh[j], h)
        np.testing.assert_allclose(x.reshape(-1, 2), refs[j].xbar, atol=1e-9)
        np.testing.assert_allclose(o.reshape(-1, 2), refs[j].obar, atol=1e-9)
    nxt = reference_rollout(stop_sign, refs[0].xbar[1], refs[0].obar[1], gh, h)
    np.testing.assert_allclose(nxt[0].xbar[:-1], refs[0].xbar[1:], atol=1e-9)
    np.testing.assert_allclose(nxt[0].obar[:-1], refs[0].obar[1:], atol=1e-9)


def test_linearize_zero_weight(stop_sign, rng):
    N = stop_sign.N
    ref = Reference(rng.normal(size=(N + 1, 2)) * 10, rng.normal(size=(N + 1, 2)) * 10, np.zeros((N, 1)))
    for j in range(2):
        lin = linearize(stop_sign, ref, j, [0.0])
        np.testing.assert_allclose(lin.P, 0)
        np.testing.assert_allclose(lin.Q, 0)
        np.testing.assert_allclose(lin.l, 0)
        for k in range(N):
            feat = stop_sign.tv.mode(j).features(ref.xbar[k], ref.obar[k])
            np.testing.assert_allclose(lin.G[k], stop_sign.tv.Bbar(k) @ feat)


def test_linearize_mode1_structure(stop_sign):
    N, dt = stop_sign.N, 0.1
    ref = Reference(np.tile([3.0, 1.0], (N + 1, 1)), np.tile([20.0, 4.0], (N + 1, 1)), np.zeros((N, 1)))
    lin = linearize(stop_sign, ref, 0, [0.8])
    phi = 1.0 * (50 - 7 - 20.0) + 6.0 * (0 - 4.0)
    np.testing.assert_allclose(lin.G[0], [[0.0], [dt * phi]])


def test_linearization_identity(stop_sign, rng):
    N = stop_sign.N
    for _ in range(20):
        xb, ob = rng.uniform(-60, 60, (N + 1, 2)), rng.uniform(-60, 60, (N + 1, 2))
        gh = rng.normal(0, 3, 1)
        for j in range(2):
            lin = linearize(stop_sign, Reference(xb, ob, np.zeros((N, 1))), j, gh)
            for k in range(N):
                lhs = lin.G[k] @ gh + lin.P[k] @ xb[k] + lin.Q[k] @ ob[k] + lin.l[k]
                rhs = stop_sign.tv.Bbar(k) @ (stop_sign.tv.mode(j).features(xb[k], ob[k]) @ gh)
                np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * max(1, np.abs(rhs).max()))


def _lin_with_G(stop_sign, rng, zero_G=False):
    N = stop_sign.N
    ref = Reference(rng.normal(size=(N + 1, 2)), rng.normal(size=(N + 1, 2)), np.zeros((N, 1)))
    lin = linearize(stop_sign, ref, 1, [0.5])
    if zero_G:
        lin = replace(lin, G=np.zeros_like(lin.G))
    return lin


def test_gain_schedule_without_information(stop_sign, rng):
    lin = _lin_with_G(stop_sign, rng, zero_G=True)
    g = horizon_gain_schedule(lin, [[0.7]], stop_sign.tv.Sigma_v, [[0.5]])
    np.testing.assert_allclose(g.K, 0)
    np.testing.assert_allclose(g.W, np.ones_like(g.W))
    np.testing.assert_allclose(g.Sigma.ravel(), 0.7 + 0.5 * np.arange(stop_sign.N))


def test_gain_schedule_scalar_oracle(rng):
    inst = random_instance(rng, N=5, n_g=1, n_o=1)
    ref = reference_rollout(inst, rng.normal(size=2), rng.normal(size=1), [np.ones(1)] * 2)[0]
    lin = linearize(inst, ref, 0, [1.0])
    sv, sn = inst.tv.Sigma_v.item(), inst.tv.Sigma_n.item()
    g = horizon_gain_schedule(lin, [[0.4]], inst.tv.Sigma_v, inst.tv.Sigma_n)
    s = 0.4
    for k in range(1, inst.N):
        gk = lin.G[k - 1].item()
        K = s * gk / (gk * gk * s + sv)
        assert g.K[k - 1].item() == pytest.approx(K, rel=1e-12)
        s = (1 - K * gk) * s + sn
        assert g.Sigma[k].item() == pytest.approx(s, rel=1e-12)


def test_gain_schedule_large_noise(stop_sign, rng):
    lin = _lin_with_G(stop_sign, rng)
    g = horizon_gain_schedule(lin, [[1.0]], 1e8 * stop_sign.tv.Sigma_v, [[0.5]])
    assert np.abs(g.K).max() < 1e-6
    g = horizon_gain_schedule(lin, [[1.0]], stop_sign.tv.Sigma_v, [[0.5]], use_kf=False)
    np.testing.assert_allclose(g.K, 0)


def test_joint_noise_cov(stop_sign, rng):
    small = replace(stop_sign, N=1)
    S = joint_noise_cov(small, [[0.3]])
    np.testing.assert_allclose(np.diag(S), [1e-3, 1e-2, 1e-2, 1e-1, 0.3, 0.5])
    inst = random_instance(rng, N=4)
    S0 = random_psd(rng, 2)
    S = joint_noise_cov(inst, S0)
    assert S.shape[0] == 4 * (2 + 2 + 2) + 2
    assert np.linalg.eigvalsh(S).min() >= -1e-12
    L = joint_noise_sqrt(inst, S0)
    np.testing.assert_allclose(L @ L.T, S, atol=1e-10)


def test_single_step_stack_reduces(stop_sign, rng):
    inst = replace(stop_sign, N=1)
    x_t, o_t, gh = rng.normal(size=2) * 5, rng.normal(size=2) * 5, np.array([0.9])
    ref = reference_rollout(inst, x_t, o_t, [gh] * 2)[1]
    lin = linearize(inst, ref, 1, gh)
    st = assemble_stacked(inst, lin, horizon_gain_schedule(lin, [[1.0]], inst.tv.Sigma_v, inst.tv.Sigma_n))
    r1 = slice(2, 4)
    np.testing.assert_allclose(st.Aoo[r1], lin.Ac[0], atol=1e-14)
    np.testing.assert_allclose(st.Aox[r1], lin.P[0], atol=1e-14)
    np.testing.assert_allclose(st.Go[r1], lin.G[0], atol=1e-14)
    np.testing.assert_allclose(st.Lo[r1], lin.l[0], atol=1e-14)
    np.testing.assert_allclose(st.Fz[r1], np.eye(2), atol=1e-14)
    np.testing.assert_allclose(st.Bo[r1], 0, atol=1e-14)


def test_no_update_keeps_weight_constant(stop_sign, rng):
    x_t, o_t, gh = np.array([0.0, 11.0]), np.array([-15.0, 12.0]), np.array([0.7])
    ref = reference_rollout(stop_sign, x_t, o_t, [gh] * 2)[1]
    lin = linearize(stop_sign, ref, 1, gh)
    st = assemble_stacked(stop_sign, lin, horizon_gain_schedule(lin, [[1.0]], stop_sign.tv.Sigma_v, stop_sign.tv.Sigma_n,
                                                            use_kf=False))
    h = rng.normal(size=stop_sign.N)
    x, o, _ = st.predict(x_t, o_t, gh, h)
    x, o = x.reshape(-1, 2), o.reshape(-1, 2)
    for k in range(stop_sign.N):
        nxt = lin.Ac[k] @ o[k] + lin.P[k] @ x[k] + lin.G[k] @ gh + lin.l[k]
        np.testing.assert_allclose(o[k + 1], nxt, atol=1e-9)


@pytest.mark.parametrize("use_kf", [True, False])
def test_stack_matches_recursion(rng, use_kf):
    for _ in range(5):
        inst = random_instance(rng, N=int(rng.integers(1, 6)))
        x_t, o_t, gh, lin, gains = random_schedule(rng, inst, mode=int(rng.integers(0, 2)), use_kf=use_kf)
        st = assemble_stacked(inst, lin, gains)
        pol = random_policy(rng, inst)
        xi = rng.normal(size=(3, st.n_xi))
        w, v, e0, n = split_xi(st, xi)
        X, O, U = batch_recursion(lin, gains, x_t, o_t, gh, pol, w, v, e0, n)
        for s in range(3):
            x, o, u = st.predict(x_t, o_t, gh, pol.h, pol.Mw, pol.Mz, xi[s])
            scale = max(1.0, np.abs(O[s]).max())
            np.testing.assert_allclose(x, X[s], atol=1e-9 * scale)
            np.testing.assert_allclose(o, O[s], atol=1e-9 * scale)
            np.testing.assert_allclose(u, U[s], atol=1e-9 * scale)
        # and against the step-by-step simulator of the linearized loop
        xs, os_, us, _, _ = simulate_linearized(lin, gains, x_t, o_t, gh, pol.h, pol.Mw, pol.Mz,
                                                w[0], v[0], e0[0], n[0])
        np.testing.assert_allclose(np.ravel(xs), X[0], atol=1e-9 * scale)
        np.testing.assert_allclose(np.ravel(os_), O[0], atol=1e-9 * scale)


def test_stack_montecarlo():
    r = check_stack_montecarlo()
    assert r.passed, r.detail
