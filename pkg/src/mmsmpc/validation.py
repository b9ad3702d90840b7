"""Independent oracles for the numerical core, runnable as a suite from the CLI.

Each check returns a ``CheckResult``; none of them reuse the code path they
are checking (e.g. the Kalman update is compared with plain Gaussian
conditioning, the stacked model with a step-by-step recursion).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from . import socp
from .estimation import GammaBelief, ModeBelief, weight_kf_update
from .models import (ConstraintSet, EvModel, LongitudinalParams, ScenarioInstance, TvModel, TvMode,
                     longitudinal_instance)
from .prediction import (GainSchedule, LinSchedule, Reference, assemble_stacked, horizon_gain_schedule,
                         linearize, reference_rollout)
from .smpc import PolicyParams, normal_quantile, plan


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# ---------------------------------------------------------------- random instances

def random_psd(rng, n: int, scale: float = 1.0) -> np.ndarray:
    X = rng.standard_normal((n, n))
    return scale * (X @ X.T / n + 0.1 * np.eye(n))


def random_instance(rng, N: int = 3, n_x: int = 2, n_u: int = 1, n_o: int = 2, n_g: int = 2,
                    M: int = 2) -> ScenarioInstance:
    """Small instance with bilinear features Phi(x, o) = sum_i c_i^T [x; o] F_i + F_0."""
    n_in = n_o  # Bbar is square so the feature matrix has n_o rows

    def make_mode(j):
        F0 = 0.3 * rng.standard_normal((n_in, n_g))
        lin = 0.2 * rng.standard_normal((n_in, n_g, n_x + n_o))

        def phi(x, o, F0=F0, lin=lin):
            return F0 + lin @ np.concatenate([x, o])

        def jac(x, o, lin=lin):
            return np.transpose(lin, (1, 0, 2))

        return TvMode(phi, jac, label=f"m{j}")

    A = np.eye(n_x) + 0.1 * rng.standard_normal((n_x, n_x))
    B = rng.standard_normal((n_x, n_u))
    ev = EvModel(A, B, random_psd(rng, n_x, 0.01))
    Abar = np.eye(n_o) + 0.1 * rng.standard_normal((n_o, n_o))
    Bbar = 0.5 * rng.standard_normal((n_o, n_in))
    tv = TvModel(Abar, Bbar, [make_mode(j) for j in range(M)], random_psd(rng, n_o, 0.01),
                 random_psd(rng, n_g, 0.05))
    cons = ConstraintSet(Fx=rng.standard_normal((2, n_x)), Fu=rng.standard_normal((2, n_u)), f=[50.0, 50.0],
                         Gx=rng.standard_normal((1, n_x)), Go=rng.standard_normal((1, n_o)), g=[50.0])
    return ScenarioInstance(ev, tv, cons, N=N, epsilon=0.2, Cx=np.eye(n_x), Cu=np.eye(n_u),
                            x_ref=np.zeros(n_x), u_ref=np.zeros(n_u))


def random_schedule(rng, instance: ScenarioInstance, mode: int = 0, use_kf: bool = True):
    """Linearization about a random reference plus its gain schedule."""
    N = instance.N
    n_x, n_o, n_u = instance.ev.n_x, instance.tv.n_o, instance.ev.n_u
    x_t = rng.standard_normal(n_x)
    o_t = rng.standard_normal(n_o)
    gh = rng.standard_normal(instance.tv.n_gamma)
    prev_h = rng.standard_normal(N * n_u)
    ref = reference_rollout(instance, x_t, o_t, [gh] * instance.tv.M, prev_h)[mode]
    lin = linearize(instance, ref, mode, gh)
    Sigma0 = random_psd(rng, instance.tv.n_gamma, 0.3)
    gains = horizon_gain_schedule(lin, Sigma0, instance.tv.Sigma_v, instance.tv.Sigma_n, use_kf)
    return x_t, o_t, gh, lin, gains


def random_policy(rng, instance: ScenarioInstance, scale: float = 0.3) -> PolicyParams:
    N, n_u, n_x, n_o = instance.N, instance.ev.n_u, instance.ev.n_x, instance.tv.n_o
    mask = lambda n_d: (np.repeat(np.arange(N), n_d)[None, :] < np.repeat(np.arange(N), n_u)[:, None])
    Mw = scale * rng.standard_normal((N * n_u, N * n_x)) * mask(n_x)
    Mz = scale * rng.standard_normal((N * n_u, N * n_o)) * mask(n_o)
    return PolicyParams(rng.standard_normal(N * n_u), Mw, Mz)


# ---------------------------------------------------------------- batched recursion oracle

def batch_recursion(lin: LinSchedule, gains: GainSchedule, x_t, o_t, gamma_hat, policy: PolicyParams,
                    w, v, e0, n):
    """Vectorized step-by-step linearized closed loop over a batch of samples.

    Shapes: w (S, N, n_x), v (S, N, n_o), e0 (S, n_g), n (S, N, n_g).
    Returns stacked x (S, (N+1) n_x), o (S, (N+1) n_o), u (S, N n_u).
    """
    S, N = w.shape[0], lin.N
    n_x, n_u = lin.B.shape[1], lin.B.shape[2]
    n_o = lin.G.shape[1]
    x = np.zeros((S, N + 1, n_x))
    o = np.zeros((S, N + 1, n_o))
    u = np.zeros((S, N, n_u))
    z = np.zeros((S, N, n_o))
    x[:, 0], o[:, 0] = x_t, o_t
    gh = np.broadcast_to(np.atleast_1d(gamma_hat), e0.shape).copy()
    gamma = gh + e0
    h = np.asarray(policy.h).reshape(N, n_u)
    for k in range(N):
        if k > 0:
            y = o[:, k] - o[:, k - 1] @ lin.Ac[k - 1].T - x[:, k - 1] @ lin.P[k - 1].T - lin.l[k - 1]
            gh = gh @ gains.W[k - 1].T + y @ gains.K[k - 1].T
            gamma = gamma + n[:, k - 1]
        rows = slice(k * n_u, (k + 1) * n_u)
        u[:, k] = (h[k] + w[:, :k].reshape(S, -1) @ policy.Mw[rows, :k * n_x].T
                   + z[:, :k].reshape(S, -1) @ policy.Mz[rows, :k * n_o].T)
        x[:, k + 1] = x[:, k] @ lin.A[k].T + u[:, k] @ lin.B[k].T + w[:, k]
        o[:, k + 1] = (o[:, k] @ lin.Ac[k].T + x[:, k] @ lin.P[k].T + gamma @ lin.G[k].T + lin.l[k]
                       + v[:, k])
        z[:, k] = o[:, k + 1] - o[:, k] @ lin.Ac[k].T - x[:, k] @ lin.P[k].T - gh @ lin.G[k].T - lin.l[k]
    return x.reshape(S, -1), o.reshape(S, -1), u.reshape(S, -1)


def split_xi(stack, xi: np.ndarray):
    """Cut joint noise samples (S, n_xi) into (w, v, e0, n) arrays for ``batch_recursion``."""
    S = xi.shape[0]
    N, n_x, n_o, n_g = stack.N, stack.n_x, stack.n_o, stack.n_gamma
    sw, sv, sn = stack.xi_slices
    rest = xi[:, sn]
    return (xi[:, sw].reshape(S, N, n_x), xi[:, sv].reshape(S, N, n_o), rest[:, :n_g],
            rest[:, n_g:].reshape(S, N, n_g))


def stacked_noise_gains(stack, policy: PolicyParams):
    """Linear maps from xi to the stacked (x, o, u) fluctuations."""
    Jw, Jz = stack.noise_maps()
    Du = policy.Mw @ Jw + policy.Mz @ Jz
    Dx = stack.B @ Du + stack.E @ Jw
    Do = stack.Bo @ Du + stack.Fw @ Jw + stack.Fz @ Jz
    return Dx, Do, Du


def sample_xi(stack, rng, S: int) -> np.ndarray:
    return rng.standard_normal((S, stack.n_xi)) @ stack.sqrt_Sigma.T


# ---------------------------------------------------------------- checks

def check_kf_conditioning(seed: int = 0, trials: int = 50, tol: float = 1e-8) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n_g = int(rng.integers(1, 4))
        n_o = int(rng.integers(1, 4))
        Sigma = random_psd(rng, n_g)
        mean = rng.standard_normal(n_g)
        G = rng.standard_normal((n_o, n_g))
        Sv = random_psd(rng, n_o, 0.5)
        Sn = random_psd(rng, n_g, 0.2)
        y = rng.standard_normal(n_o)
        post, _ = weight_kf_update(GammaBelief(mean, Sigma), G, y, Sv, Sn)
        # joint Gaussian of (gamma, y) conditioned on y, then the walk step
        Syy = G @ Sigma @ G.T + Sv
        Sgy = Sigma @ G.T
        m_ref = mean + Sgy @ np.linalg.solve(Syy, y - G @ mean)
        C_ref = Sigma - Sgy @ np.linalg.solve(Syy, Sgy.T) + Sn
        err = max(np.abs(post.mean - m_ref).max(), np.abs(post.cov - C_ref).max())
        worst = max(worst, err)
    return CheckResult("kf_vs_conditioning", worst <= tol, f"max abs error {worst:.2e} (tol {tol:g})")


def check_stack_recursion(seed: int = 0, trials: int = 20, tol: float = 1e-9) -> CheckResult:
    """Stacked affine maps against the step-by-step recursion, per noise realization."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        inst = random_instance(rng, N=int(rng.integers(1, 5)), n_g=int(rng.integers(1, 3)))
        x_t, o_t, gh, lin, gains = random_schedule(rng, inst, mode=int(rng.integers(0, 2)))
        st = assemble_stacked(inst, lin, gains)
        pol = random_policy(rng, inst)
        xi = np.vstack([np.zeros(st.n_xi), sample_xi(st, rng, 3)])
        xr, orr, ur = batch_recursion(lin, gains, x_t, o_t, gh, pol, *split_xi(st, xi))
        for s in range(xi.shape[0]):
            x, o, u = st.predict(x_t, o_t, gh, pol.h, pol.Mw, pol.Mz, xi[s])
            scale = 1.0 + max(np.abs(xr[s]).max(), np.abs(orr[s]).max())
            err = max(np.abs(x - xr[s]).max(), np.abs(o - orr[s]).max(), np.abs(u - ur[s]).max()) / scale
            worst = max(worst, err)
    return CheckResult("stack_vs_recursion", worst <= tol, f"max scaled error {worst:.2e} (tol {tol:g})")


def check_stack_montecarlo(seed: int = 0, samples: int = 100_000, frob_tol: float = 0.05,
                           se_mult: float = 4.0) -> CheckResult:
    """Sample moments of the recursion against the covariance implied by the stacks."""
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, N=4, n_g=2)
    x_t, o_t, gh, lin, gains = random_schedule(rng, inst, mode=1)
    st = assemble_stacked(inst, lin, gains)
    pol = random_policy(rng, inst)
    # draw the primitive noises independently of the stacked square root
    N, n_x, n_o, n_g = st.N, st.n_x, st.n_o, st.n_gamma
    w = rng.multivariate_normal(np.zeros(n_x), inst.ev.Sigma_w, size=(samples, N))
    v = rng.multivariate_normal(np.zeros(n_o), inst.tv.Sigma_v, size=(samples, N))
    e0 = rng.multivariate_normal(np.zeros(n_g), gains.Sigma[0], size=samples)
    n = rng.multivariate_normal(np.zeros(n_g), inst.tv.Sigma_n, size=(samples, N))
    xr, orr, _ = batch_recursion(lin, gains, x_t, o_t, gh, pol, w, v, e0, n)
    Y = np.hstack([xr, orr])
    x0, o0, _ = st.predict(x_t, o_t, gh, pol.h, pol.Mw, pol.Mz)
    mu = np.concatenate([x0, o0])
    Dx, Do, _ = stacked_noise_gains(st, pol)
    D = np.vstack([Dx, Do])
    cov = D @ st.Sigma @ D.T
    se = np.sqrt(np.maximum(np.diag(cov), 0.0) / samples)
    dev = np.abs(Y.mean(axis=0) - mu)
    live = se > 0
    mean_ok = bool(np.all(dev[live] <= se_mult * se[live]) and np.all(dev[~live] <= 1e-9))
    rel = np.linalg.norm(np.cov(Y, rowvar=False) - cov) / np.linalg.norm(cov)
    ok = mean_ok and rel <= frob_tol
    worst_z = float(np.max(dev[live] / se[live])) if live.any() else 0.0
    return CheckResult("stack_vs_montecarlo", ok,
                       f"max |mean dev|/SE {worst_z:.2f} (tol {se_mult:g}), cov Frobenius rel {rel:.3f} (tol {frob_tol:g})")


def check_linearization(seed: int = 0, trials: int = 200, tol: float = 1e-12) -> CheckResult:
    """G gamma_hat + P xbar + Q obar + l reproduces Bbar Phi gamma_hat at every reference point."""
    rng = np.random.default_rng(seed)
    inst = longitudinal_instance()
    worst = 0.0
    for _ in range(trials):
        N = inst.N
        xbar = rng.uniform(-60, 60, (N + 1, 2))
        obar = rng.uniform(-60, 60, (N + 1, 2))
        ref = Reference(xbar, obar, np.zeros((N, 1)))
        for j in range(inst.tv.M):
            gh = rng.normal(0, 3, inst.tv.n_gamma)
            lin = linearize(inst, ref, j, gh)
            for k in range(N):
                lhs = lin.G[k] @ gh + lin.P[k] @ xbar[k] + lin.Q[k] @ obar[k] + lin.l[k]
                rhs = inst.tv.Bbar(k) @ (inst.tv.mode(j).features(xbar[k], obar[k]) @ gh)
                worst = max(worst, np.abs(lhs - rhs).max() / max(1.0, np.abs(rhs).max()))
    return CheckResult("linearization_exactness", worst <= tol, f"max rel error {worst:.2e} (tol {tol:g})")


def bisect_quantile(p: float, tol: float = 1e-14) -> float:
    lo, hi = -40.0, 40.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ndtr(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def check_quantile(tol: float = 1e-9) -> CheckResult:
    ps = np.concatenate([[1e-10, 1e-6, 1e-3, 0.01, 0.02425, 0.1, 0.5, 0.9, 0.975, 0.97575, 0.99, 1 - 1e-6],
                         np.linspace(0.001, 0.999, 97)])
    worst = max(abs(normal_quantile(p) - bisect_quantile(p)) for p in ps)
    return CheckResult("normal_quantile_vs_bisection", worst <= tol, f"max abs error {worst:.2e} (tol {tol:g})")


def nominal_test_state():
    """A default-instance state where the SMPC is feasible (TV further back than the run start)."""
    inst = longitudinal_instance(LongitudinalParams())
    x_t = np.array([0.0, 11.0])
    o_t = np.array([-20.0, 11.0])
    beliefs = [GammaBelief([1.0], [[0.5]]), GammaBelief([1.0], [[0.5]])]
    return inst, x_t, o_t, beliefs, ModeBelief.uniform(2)


def chance_violation_rates(inst, stacks, res, x_t, o_t, beliefs, samples: int, seed: int = 0):
    """Empirical violation frequency of every tightened row under the linearized model.

    Returns a list of (kind, mode, k, row, rate, bound).
    """
    rng = np.random.default_rng(seed)
    cons = inst.constraints
    pol = res.policy
    out = []
    for j, st in enumerate(stacks):
        xi = sample_xi(st, rng, samples)
        x0, o0, u0 = st.predict(x_t, o_t, beliefs[j].mean, pol.h, pol.Mw, pol.Mz)
        Dx, Do, Du = stacked_noise_gains(st, pol)
        X = x0 + xi @ Dx.T
        O = o0 + xi @ Do.T
        U = u0 + xi @ Du.T
        n_x, n_o, n_u = st.n_x, st.n_o, st.n_u
        for kind, eps_t, nrows in (("xu", inst.epsilon / cons.n_xu, cons.n_xu), ("ca", inst.epsilon / cons.n_c, cons.n_c)):
            bound = eps_t + 3 * math.sqrt(eps_t * (1 - eps_t) / samples)
            for i in range(nrows):
                if kind == "xu":
                    for k in range(st.N):
                        val = X[:, (k + 1) * n_x:(k + 2) * n_x] @ cons.Fx[i] + U[:, k * n_u:(k + 1) * n_u] @ cons.Fu[i]
                        out.append((kind, j, k, i, float(np.mean(val > cons.f[i])), bound))
                else:
                    for k in range(1, st.N + 1):
                        val = X[:, k * n_x:(k + 1) * n_x] @ cons.Gx[i] + O[:, k * n_o:(k + 1) * n_o] @ cons.Go[i]
                        out.append((kind, j, k, i, float(np.mean(val > cons.g[i])), bound))
    return out


def check_chance_montecarlo(samples: int = 10_000, seed: int = 0) -> CheckResult:
    inst, x_t, o_t, beliefs, mb = nominal_test_state()
    res, stacks = plan(inst, x_t, o_t, beliefs, mb, None, "full")
    if res.status != socp.OPTIMAL:
        return CheckResult("chance_montecarlo", False, f"reference solve returned {res.status}")
    rates = chance_violation_rates(inst, stacks, res, x_t, o_t, beliefs, samples, seed)
    bad = [r for r in rates if r[4] > r[5]]
    worst = max(rates, key=lambda r: r[4] - r[5])
    return CheckResult("chance_montecarlo", not bad,
                       f"{len(bad)} of {len(rates)} rows above bound; worst {worst[0]} mode {worst[1] + 1} "
                       f"step {worst[2]} rate {worst[4]:.4f} vs {worst[5]:.4f}")


def check_solver_residuals(seed: int = 0, trials: int = 10, tol: float = 1e-6) -> CheckResult:
    """Every reported-optimal SMPC solve passes the independent residual check."""
    rng = np.random.default_rng(seed)
    inst, x_t, o_t, beliefs, mb = nominal_test_state()
    worst, solved = 0.0, 0
    for _ in range(trials):
        xs = x_t + rng.normal(0, [1.0, 1.0])
        os_ = o_t + rng.normal(0, [2.0, 1.0])
        res, _ = plan(inst, xs, os_, beliefs, mb, None, "full")
        if res.status == socp.OPTIMAL:
            solved += 1
            worst = max(worst, socp.verify(res.program, res.solution.x).worst)
    ok = solved > 0 and worst <= tol
    return CheckResult("solver_residuals", ok, f"{solved}/{trials} optimal, max residual {worst:.2e} (tol {tol:g})")


SUITE: Dict[str, Callable[[], CheckResult]] = {
    "kf": check_kf_conditioning,
    "stack": check_stack_recursion,
    "stack_mc": check_stack_montecarlo,
    "linearization": check_linearization,
    "quantile": check_quantile,
    "chance": check_chance_montecarlo,
    "residuals": check_solver_residuals,
}


def run_suite(names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    names = list(SUITE) if names is None else list(names)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown checks: {unknown}")
    return [SUITE[n]() for n in names]
