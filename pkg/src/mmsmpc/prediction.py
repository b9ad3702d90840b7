"""Horizon predictions: reference rollout, linearization of the TV feature
term, the in-horizon Kalman gain schedule and the stacked (batch) model.

Stacks are indexed from the current time: block k of a state stack is the
prediction k steps ahead (k = 0..N, block 0 being the measured state), block k
of an input or noise stack is the quantity applied at step k (k = 0..N-1).

The joint noise vector of one mode is

    xi = [w_0..w_{N-1}, v_0..v_{N-1}, e_0, n_0..n_{N-1}]

with e_0 = gamma_t - gamma_hat_{t|t} the current weight estimation error and
n_k the weight random-walk increments. The effective TV noise
z_k = v_k + G_k (gamma_k - gamma_hat_k) is linear in (v, e_0, n).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .estimation import kalman_gain, symmetrize
from .models import ContractError, ScenarioInstance


def stack_transition(As) -> np.ndarray:
    """[I; A_0; A_1 A_0; ...; A_{N-1}..A_0]."""
    As = [np.atleast_2d(A) for A in As]
    n = As[0].shape[1] if As else 0
    blocks = [np.eye(n)]
    for k, A in enumerate(As):
        if A.shape[1] != blocks[-1].shape[0]:
            raise ContractError(f"transition block {k} is not conformable")
        blocks.append(A @ blocks[-1])
    return np.vstack(blocks)


def stack_input(As, Bs) -> np.ndarray:
    """Strictly lower block-triangular map from [u_0..u_{N-1}] to [x_0..x_N].

    Block (k, i) = A_{k-1} .. A_{i+1} B_i for k > i; the first block row is zero.
    """
    As = [np.atleast_2d(A) for A in As]
    Bs = [np.atleast_2d(B) for B in Bs]
    if len(As) != len(Bs):
        raise ContractError("stack_input needs one A and one B per step")
    N = len(Bs)
    n = Bs[0].shape[0] if N else 0
    cols = np.cumsum([0] + [B.shape[1] for B in Bs])
    out = np.zeros(((N + 1) * n, cols[-1]))
    for i, B in enumerate(Bs):
        if B.shape[0] != n or As[i].shape != (n, n):
            raise ContractError(f"input block {i} is not conformable")
        blk = B
        for k in range(i + 1, N + 1):
            out[k * n:(k + 1) * n, cols[i]:cols[i + 1]] = blk
            if k < N:
                blk = As[k] @ blk
    return out


def stack_blockdiag(As) -> np.ndarray:
    return block_diag(*[np.atleast_2d(A) for A in As])


def selector(k: int, n: int, nblocks: int) -> np.ndarray:
    S = np.zeros((n, n * nblocks))
    S[:, k * n:(k + 1) * n] = np.eye(n)
    return S


@dataclass(frozen=True)
class Reference:
    xbar: np.ndarray  # (N+1, n_x)
    obar: np.ndarray  # (N+1, n_o)
    ubar: np.ndarray  # (N, n_u)


@dataclass(frozen=True)
class LinSchedule:
    """Per-step coefficients of Bbar Phi(x, o) gamma ~ G gamma + P x + Q o + l."""

    A: np.ndarray     # (N, n_x, n_x) EV
    B: np.ndarray     # (N, n_x, n_u) EV
    Abar: np.ndarray  # (N, n_o, n_o)
    G: np.ndarray     # (N, n_o, n_gamma)
    P: np.ndarray     # (N, n_o, n_x)
    Q: np.ndarray     # (N, n_o, n_o)
    l: np.ndarray     # (N, n_o)
    ref: Reference

    @property
    def N(self) -> int:
        return self.G.shape[0]

    @property
    def Ac(self) -> np.ndarray:
        return self.Abar + self.Q


@dataclass(frozen=True)
class GainSchedule:
    K: np.ndarray      # (N-1, n_gamma, n_o): K_1..K_{N-1}
    W: np.ndarray      # (N-1, n_gamma, n_gamma)
    Sigma: np.ndarray  # (N, n_gamma, n_gamma): Sigma_0..Sigma_{N-1}


def shifted_inputs(prev_h, N: int, n_u: int) -> np.ndarray:
    """Previous plan advanced one step, last input held; zeros without a plan."""
    if prev_h is None:
        return np.zeros((N, n_u))
    h = np.asarray(prev_h, dtype=float).reshape(-1, n_u)
    out = np.empty((N, n_u))
    m = min(N, h.shape[0] - 1)
    out[:m] = h[1:m + 1]
    out[m:] = h[-1]
    return out


def reference_rollout(instance: ScenarioInstance, x_t, o_t, gamma_hats, prev_h=None, t: int = 0):
    """Noise-free rollout per mode used as linearization points.

    ``prev_h`` is the feedforward sequence of the previous solve (None at the
    first step); ``gamma_hats`` holds one weight estimate per mode.
    """
    ev, tv, N = instance.ev, instance.tv, instance.N
    ubar = shifted_inputs(prev_h, N, ev.n_u)
    xbar = np.empty((N + 1, ev.n_x))
    xbar[0] = x_t
    for k in range(N):
        xbar[k + 1] = ev.A(t + k) @ xbar[k] + ev.B @ ubar[k]
    refs = []
    for j, gh in enumerate(gamma_hats):
        mode = tv.mode(j)
        obar = np.empty((N + 1, tv.n_o))
        obar[0] = o_t
        for k in range(N):
            obar[k + 1] = tv.Abar(t + k) @ obar[k] + tv.Bbar(t + k) @ (mode.features(xbar[k], obar[k]) @ gh)
        refs.append(Reference(xbar.copy(), obar, ubar.copy()))
    return refs


def linearize(instance: ScenarioInstance, ref: Reference, mode: int, gamma_hat, t: int = 0) -> LinSchedule:
    ev, tv, N = instance.ev, instance.tv, instance.N
    m = tv.mode(mode)
    gamma_hat = np.atleast_1d(np.asarray(gamma_hat, dtype=float))
    n_x, n_o = ev.n_x, tv.n_o
    A = np.stack([ev.A(t + k) for k in range(N)])
    B = np.stack([ev.B] * N)
    Abar = np.stack([tv.Abar(t + k) for k in range(N)])
    G = np.empty((N, n_o, tv.n_gamma))
    P = np.empty((N, n_o, n_x))
    Q = np.empty((N, n_o, n_o))
    l = np.empty((N, n_o))
    for k in range(N):
        xb, ob = ref.xbar[k], ref.obar[k]
        Bb = tv.Bbar(t + k)
        Phi = m.features(xb, ob)
        G[k] = Bb @ Phi
        PQ = Bb @ np.tensordot(gamma_hat, m.jacobians(xb, ob), axes=1)
        P[k], Q[k] = PQ[:, :n_x], PQ[:, n_x:]
        # reproduces Bbar Phi gamma_hat exactly at the linearization point
        l[k] = Bb @ (Phi @ gamma_hat) - G[k] @ gamma_hat - P[k] @ xb - Q[k] @ ob
    return LinSchedule(A, B, Abar, G, P, Q, l, ref)


def horizon_gain_schedule(lin: LinSchedule, Sigma_init, Sigma_v, Sigma_n, use_kf: bool = True) -> GainSchedule:
    N = lin.N
    n_g = lin.G.shape[2]
    n_o = lin.G.shape[1]
    Sigma_n = np.atleast_2d(Sigma_n)
    Sig = np.empty((N, n_g, n_g))
    K = np.zeros((max(N - 1, 0), n_g, n_o))
    W = np.empty((max(N - 1, 0), n_g, n_g))
    Sig[0] = np.atleast_2d(Sigma_init)
    for k in range(1, N):
        Gp = lin.G[k - 1]
        if use_kf:
            K[k - 1] = kalman_gain(Sig[k - 1], Gp, np.atleast_2d(Sigma_v))
        W[k - 1] = np.eye(n_g) - K[k - 1] @ Gp
        Sig[k] = symmetrize(W[k - 1] @ Sig[k - 1] + Sigma_n)
    return GainSchedule(K, W, Sig)


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    S = symmetrize(np.atleast_2d(S))
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        # singular blocks (e.g. zero covariances) get an exact eigen square root
        lam, V = np.linalg.eigh(S)
        return V * np.sqrt(np.maximum(lam, 0.0))


def joint_noise_cov(instance: ScenarioInstance, Sigma_init) -> np.ndarray:
    """blkdiag(I_N (x) Sigma_w, I_N (x) Sigma_v, Sigma_init, I_N (x) Sigma_n)."""
    N = instance.N
    ev, tv = instance.ev, instance.tv
    return block_diag(np.kron(np.eye(N), ev.Sigma_w), np.kron(np.eye(N), tv.Sigma_v),
                      np.atleast_2d(Sigma_init), np.kron(np.eye(N), tv.Sigma_n))


def joint_noise_sqrt(instance: ScenarioInstance, Sigma_init) -> np.ndarray:
    N = instance.N
    ev, tv = instance.ev, instance.tv
    return block_diag(np.kron(np.eye(N), _psd_sqrt(ev.Sigma_w)), np.kron(np.eye(N), _psd_sqrt(tv.Sigma_v)),
                      _psd_sqrt(Sigma_init), np.kron(np.eye(N), _psd_sqrt(tv.Sigma_n)))


def _transition_products(W: np.ndarray, N: int, n: int) -> np.ndarray:
    """Lower block-triangular T with T[k, i] = W_k .. W_{i+1} (identity for k = i).

    ``W[k-1]`` holds W_k, k = 1..N-1.
    """
    T = np.zeros((N * n, N * n))
    for i in range(N):
        blk = np.eye(n)
        for k in range(i, N):
            if k > i:
                blk = W[k - 1] @ blk
            T[k * n:(k + 1) * n, i * n:(i + 1) * n] = blk
    return T


def weight_mean_maps(lin: LinSchedule, gains: GainSchedule):
    """Weight-estimate stack in terms of states:

        gamma_hat = Gg gamma_hat_0 + Gx x + Go o + Gl l

    with x, o the (N+1)-block state stacks and l the N-block offset stack.
    Returns (Gg, Gx, Go, Gl).
    """
    N = lin.N
    n_g, n_o = lin.G.shape[2], lin.G.shape[1]
    n_x = lin.P.shape[2]
    Gg = stack_transition(gains.W)
    if N == 1:
        return Gg, np.zeros((n_g, (N + 1) * n_x)), np.zeros((n_g, (N + 1) * n_o)), np.zeros((n_g, N * n_o))
    Kst = stack_input(gains.W, gains.K)  # N blocks x (N-1) blocks, applied to y_1..y_{N-1}
    # y_i = o_i - Ac_{i-1} o_{i-1} - P_{i-1} x_{i-1} - l_{i-1},  i = 1..N-1
    pad_x = np.zeros(((N - 1) * n_o, 2 * n_x))
    pad_o = np.zeros(((N - 1) * n_o, n_o))
    Px = np.hstack([stack_blockdiag(lin.P[:N - 1]), pad_x])
    shift = np.hstack([pad_o, np.eye((N - 1) * n_o), pad_o])
    Ao = np.hstack([stack_blockdiag(lin.Ac[:N - 1]), np.zeros(((N - 1) * n_o, 2 * n_o))])
    Gx = -Kst @ Px
    Go = Kst @ (shift - Ao)
    Gl = -Kst @ np.hstack([np.eye((N - 1) * n_o), np.zeros(((N - 1) * n_o, n_o))])
    return Gg, Gx, Go, Gl


@dataclass(frozen=True)
class StackedModel:
    """Affine maps of one mode's horizon predictions.

        x  = A x_t + B u + E w
        o  = Aoo o_t + Aox x_t + Bo u + Go gamma_hat_t + Fw w + Fz z + Lo
        z  = Gamma_zv v + Gamma_zn nj,    nj = [e_0, n_0..n_{N-1}]
        u  = h + Mw w + Mz z
    """

    N: int
    n_x: int
    n_u: int
    n_o: int
    n_gamma: int
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    Aoo: np.ndarray
    Aox: np.ndarray
    Bo: np.ndarray
    Go: np.ndarray
    Fw: np.ndarray
    Fz: np.ndarray
    Lo: np.ndarray
    Gamma_zv: np.ndarray
    Gamma_zn: np.ndarray
    Sigma: np.ndarray
    sqrt_Sigma: np.ndarray
    parts: dict = field(default_factory=dict, repr=False)

    @property
    def n_xi(self) -> int:
        return self.N * (self.n_x + self.n_o + self.n_gamma) + self.n_gamma

    @property
    def xi_slices(self):
        N = self.N
        a = N * self.n_x
        b = a + N * self.n_o
        return slice(0, a), slice(a, b), slice(b, self.n_xi)

    def Sx(self, k: int) -> np.ndarray:
        return selector(k, self.n_x, self.N + 1)

    def So(self, k: int) -> np.ndarray:
        return selector(k, self.n_o, self.N + 1)

    def Su(self, k: int) -> np.ndarray:
        return selector(k, self.n_u, self.N)

    def noise_maps(self):
        """(w-map, z-map) from xi: w = Jw xi, z = Jz xi."""
        sw, sv, sn = self.xi_slices
        Jw = np.zeros((self.N * self.n_x, self.n_xi))
        Jw[:, sw] = np.eye(self.N * self.n_x)
        Jz = np.zeros((self.N * self.n_o, self.n_xi))
        Jz[:, sv] = self.Gamma_zv
        Jz[:, sn] = self.Gamma_zn
        return Jw, Jz

    def predict(self, x_t, o_t, gamma_hat, h, Mw=None, Mz=None, xi=None):
        """Stacked (x, o, u) for one noise realization (zero noise when ``xi`` is None)."""
        h = np.asarray(h, dtype=float).ravel()
        Mw = np.zeros((h.size, self.N * self.n_x)) if Mw is None else Mw
        Mz = np.zeros((h.size, self.N * self.n_o)) if Mz is None else Mz
        xi = np.zeros(self.n_xi) if xi is None else np.asarray(xi, dtype=float)
        Jw, Jz = self.noise_maps()
        w, z = Jw @ xi, Jz @ xi
        u = h + Mw @ w + Mz @ z
        x = self.A @ x_t + self.B @ u + self.E @ w
        o = (self.Aoo @ o_t + self.Aox @ x_t + self.Bo @ u + self.Go @ np.atleast_1d(gamma_hat)
             + self.Fw @ w + self.Fz @ z + self.Lo)
        return x, o, u


def assemble_stacked(instance: ScenarioInstance, lin: LinSchedule, gains: GainSchedule) -> StackedModel:
    N = lin.N
    n_x, n_u = lin.B.shape[1], lin.B.shape[2]
    n_o, n_g = lin.G.shape[1], lin.G.shape[2]
    if gains.K.shape[0] != N - 1 or gains.Sigma.shape[0] != N:
        raise ContractError("gain schedule length does not match the horizon (GainSchedule)")
    if lin.P.shape != (N, n_o, n_x) or lin.Q.shape != (N, n_o, n_o):
        raise ContractError("linearization shapes are inconsistent (LinSchedule.P/Q)")

    # EV
    A = stack_transition(lin.A)
    B = stack_input(lin.A, lin.B)
    E = stack_input(lin.A, [np.eye(n_x)] * N)
    first = slice(0, N * n_x)  # x_0 .. x_{N-1}

    # TV under the consolidated model
    Ac = lin.Ac
    Abar_st = stack_transition(Ac)
    Fbar = stack_input(Ac, [np.eye(n_o)] * N)
    Ptil = stack_blockdiag(lin.P)
    Gtil = stack_blockdiag(lin.G)
    Gones = np.tile(np.eye(n_g), (N, 1))
    # gamma_hat_k = gamma_hat_0 + sum_{i<=k} K_i z_{i-1}
    GK = np.zeros((N * n_g, N * n_o))
    for k in range(1, N):
        for i in range(1, k + 1):
            GK[k * n_g:(k + 1) * n_g, (i - 1) * n_o:i * n_o] = gains.K[i - 1]
    Pfull = Fbar @ Ptil
    Aoo = Abar_st
    Aox = Pfull @ A[first]
    Bo = Pfull @ B[first]
    Fw = Pfull @ E[first]
    Go = Fbar @ Gtil @ Gones
    Fz = Fbar @ (Gtil @ GK + np.eye(N * n_o))
    Lo = Fbar @ lin.l.ravel()

    # effective noise: e_k = W_k e_{k-1} + n_{k-1} - K_k v_{k-1}
    T = _transition_products(gains.W, N, n_g)
    Kv = np.zeros((N * n_g, N * n_o))
    Nn = np.zeros((N * n_g, (N + 1) * n_g))
    Nn[:n_g, :n_g] = np.eye(n_g)
    for k in range(1, N):
        Kv[k * n_g:(k + 1) * n_g, (k - 1) * n_o:k * n_o] = -gains.K[k - 1]
        Nn[k * n_g:(k + 1) * n_g, k * n_g:(k + 1) * n_g] = np.eye(n_g)
    Gamma_zv = np.eye(N * n_o) + Gtil @ T @ Kv
    Gamma_zn = Gtil @ T @ Nn

    Sigma = joint_noise_cov(instance, gains.Sigma[0])
    sqrt_Sigma = joint_noise_sqrt(instance, gains.Sigma[0])
    Gg, Gx, Gow, Gl = weight_mean_maps(lin, gains)
    parts = dict(Abar=Abar_st, Fbar=Fbar, Ptilde=Ptil, Gtilde=Gtil, Atilde=stack_blockdiag(Ac),
                 Gones=Gones, Gamma_cum=np.kron(np.tril(np.ones((N, N))), np.eye(n_g)),
                 Gamma_K=GK, Gamma_W=T, Gamma_gamma=Gg, Gamma_x=Gx, Gamma_o=Gow, Gamma_l=Gl)
    return StackedModel(N, n_x, n_u, n_o, n_g, A, B, E, Aoo, Aox, Bo, Go, Fw, Fz, Lo,
                        Gamma_zv, Gamma_zn, Sigma, sqrt_Sigma, parts)


def build_mode_stacks(instance: ScenarioInstance, x_t, o_t, gamma_beliefs, prev_h=None,
                      use_kf: bool = True, t: int = 0):
    """Reference, linearization, gains and stacks for every mode."""
    refs = reference_rollout(instance, x_t, o_t, [b.mean for b in gamma_beliefs], prev_h, t)
    out = []
    for j, (ref, b) in enumerate(zip(refs, gamma_beliefs)):
        lin = linearize(instance, ref, j, b.mean, t)
        gains = horizon_gain_schedule(lin, b.cov, instance.tv.Sigma_v, instance.tv.Sigma_n, use_kf)
        out.append(assemble_stacked(instance, lin, gains))
    return out


def simulate_linearized(lin: LinSchedule, gains: GainSchedule, x_t, o_t, gamma_hat, h,
                        Mw=None, Mz=None, w=None, v=None, e0=None, n=None):
    """Step-by-step simulation of the linearized closed loop.

    The true weight follows its random walk, the TV follows the linearized
    feature dynamics, the weight estimate follows the in-horizon Kalman mean
    recursion driven by measured outputs, and the policy feeds back the
    measured w and z. Returns (x, o, u, gamma_hat, z) trajectories.
    """
    N = lin.N
    n_x, n_u = lin.B.shape[1], lin.B.shape[2]
    n_o, n_g = lin.G.shape[1], lin.G.shape[2]
    h = np.asarray(h, dtype=float).reshape(N, n_u)
    Mw = np.zeros((N * n_u, N * n_x)) if Mw is None else Mw
    Mz = np.zeros((N * n_u, N * n_o)) if Mz is None else Mz
    w = np.zeros((N, n_x)) if w is None else np.asarray(w).reshape(N, n_x)
    v = np.zeros((N, n_o)) if v is None else np.asarray(v).reshape(N, n_o)
    n = np.zeros((N, n_g)) if n is None else np.asarray(n).reshape(N, n_g)
    gh0 = np.atleast_1d(np.asarray(gamma_hat, dtype=float))
    e0 = np.zeros(n_g) if e0 is None else np.atleast_1d(e0)

    x = np.zeros((N + 1, n_x))
    o = np.zeros((N + 1, n_o))
    u = np.zeros((N, n_u))
    gh = np.zeros((N, n_g))
    z = np.zeros((N, n_o))
    x[0], o[0] = x_t, o_t
    gamma = gh0 + e0
    gh[0] = gh0
    for k in range(N):
        if k > 0:
            y = o[k] - lin.Ac[k - 1] @ o[k - 1] - lin.P[k - 1] @ x[k - 1] - lin.l[k - 1]
            gh[k] = gains.W[k - 1] @ gh[k - 1] + gains.K[k - 1] @ y
            gamma = gamma + n[k - 1]
        rows = slice(k * n_u, (k + 1) * n_u)
        u[k] = h[k] + Mw[rows, :k * n_x] @ w[:k].ravel() + Mz[rows, :k * n_o] @ z[:k].ravel()
        x[k + 1] = lin.A[k] @ x[k] + lin.B[k] @ u[k] + w[k]
        o[k + 1] = lin.Ac[k] @ o[k] + lin.P[k] @ x[k] + lin.G[k] @ gamma + lin.l[k] + v[k]
        z[k] = o[k + 1] - lin.Ac[k] @ o[k] - lin.P[k] @ x[k] - lin.G[k] @ gh[k] - lin.l[k]
    return x, o, u, gh, z
