"""Convex SMPC over affine disturbance-feedback policies

    u = h + Mw w + Mz z

with Gaussian chance constraints tightened into second-order cones and the
mode-probability-weighted expected quadratic cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import socp
from .estimation import GammaBelief, ModeBelief
from .models import ContractError, ScenarioInstance
from .prediction import StackedModel, build_mode_stacks

VARIANTS = ("full", "no_kf", "open_loop")
RESIDUAL_TOL = 1e-6
RECOVERY_RESIDUAL_TOL = 1e-4

# Acklam's rational approximation of the standard normal quantile
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    # Newton step on Phi(x) - p
    err = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    return x - err * math.sqrt(2 * math.pi) * math.exp(0.5 * x * x)


@dataclass(frozen=True)
class PolicyParams:
    h: np.ndarray   # (N n_u,)
    Mw: np.ndarray  # (N n_u, N n_x)
    Mz: np.ndarray  # (N n_u, N n_o)


class PolicyLayout:
    """Maps the decision vector theta = [h, free(Mw), free(Mz)] to policy matrices.

    Block row k of Mw/Mz may only use disturbances of steps < k; those are the
    free entries. Without feedback both matrices are identically zero.
    """

    def __init__(self, N: int, n_u: int, n_x: int, n_o: int, feedback: bool = True):
        self.N, self.n_u, self.n_x, self.n_o = N, n_u, n_x, n_o
        self.feedback = feedback
        self.n_h = N * n_u
        self.idx_w = np.flatnonzero(self._mask(n_x)) if feedback else np.zeros(0, dtype=int)
        self.idx_z = np.flatnonzero(self._mask(n_o)) if feedback else np.zeros(0, dtype=int)
        self.n = self.n_h + self.idx_w.size + self.idx_z.size

    def _mask(self, n_d: int) -> np.ndarray:
        rows = np.repeat(np.arange(self.N), self.n_u)[:, None]
        cols = np.repeat(np.arange(self.N), n_d)[None, :]
        return cols < rows

    @property
    def sl_h(self):
        return slice(0, self.n_h)

    @property
    def sl_w(self):
        return slice(self.n_h, self.n_h + self.idx_w.size)

    @property
    def sl_z(self):
        return slice(self.n_h + self.idx_w.size, self.n)

    def unpack(self, theta) -> PolicyParams:
        theta = np.asarray(theta, dtype=float)
        Mw = np.zeros(self.n_h * self.N * self.n_x)
        Mz = np.zeros(self.n_h * self.N * self.n_o)
        Mw[self.idx_w] = theta[self.sl_w]
        Mz[self.idx_z] = theta[self.sl_z]
        return PolicyParams(theta[self.sl_h].copy(), Mw.reshape(self.n_h, -1), Mz.reshape(self.n_h, -1))

    def pack(self, policy: PolicyParams) -> np.ndarray:
        parts = [np.asarray(policy.h, dtype=float).ravel()]
        parts.append(np.asarray(policy.Mw).ravel()[self.idx_w])
        parts.append(np.asarray(policy.Mz).ravel()[self.idx_z])
        return np.concatenate(parts)


def _sandwich(P, Q, idx) -> np.ndarray:
    """Matrix taking the free entries (flat row-major indices ``idx``) of M to vec(P M Q)."""
    return np.kron(np.atleast_2d(P), np.atleast_2d(Q).T)[:, idx]


@dataclass
class SocConstraint:
    """kappa ||C theta + d|| <= a^T theta + b."""

    a: np.ndarray
    b: float
    C: np.ndarray
    d: np.ndarray
    kappa: float

    def slack(self, theta) -> float:
        return float(self.a @ theta + self.b - self.kappa * np.linalg.norm(self.C @ theta + self.d))

    def as_cone(self) -> socp.Cone:
        return socp.Cone(self.kappa * self.C, self.kappa * self.d, self.a, self.b)


def _noise_factors(stack: StackedModel):
    """Square-root factors: w = Lw xi_w, z = Zs xi_std for standard normal xi."""
    sw, sv, sn = stack.xi_slices
    L = stack.sqrt_Sigma
    Lw = L[sw, sw]
    Zs = np.hstack([stack.Gamma_zv @ L[sv, sv], stack.Gamma_zn @ L[sn, sn]])
    return Lw, Zs


def _scalar_chance(layout: PolicyLayout, Lw, Zs, p, qw, qz, const, bound, kappa) -> SocConstraint:
    """Tightened form of P[p.u + qw.w + qz.z + const > bound] <= eps."""
    n = layout.n
    a = np.zeros(n)
    a[layout.sl_h] = -p
    b = bound - const
    blocks_C, blocks_d = [], []
    Cw = np.zeros((Lw.shape[1], n))
    if layout.feedback:
        Cw[:, layout.sl_w] = _sandwich(p[None, :], Lw, layout.idx_w)
    blocks_C.append(Cw)
    blocks_d.append(Lw.T @ qw)
    Cz = np.zeros((Zs.shape[1], n))
    if layout.feedback:
        Cz[:, layout.sl_z] = _sandwich(p[None, :], Zs, layout.idx_z)
    blocks_C.append(Cz)
    blocks_d.append(Zs.T @ qz)
    return SocConstraint(a, b, np.vstack(blocks_C), np.concatenate(blocks_d), kappa)


def build_xu_constraints(stack: StackedModel, instance: ScenarioInstance, k: int, x_t,
                         layout: PolicyLayout) -> List[SocConstraint]:
    """Rows on (x_{k+1}, u_k), k = 0..N-1, each with risk epsilon / n_xu."""
    cons = instance.constraints
    if cons.n_xu == 0:
        return []
    n_x, n_u = stack.n_x, stack.n_u
    kappa = normal_quantile(1 - instance.epsilon / cons.n_xu)
    rx = slice((k + 1) * n_x, (k + 2) * n_x)
    Lw, Zs = _noise_factors(stack)
    Bk, Ek, Ak = stack.B[rx], stack.E[rx], stack.A[rx]
    out = []
    for i in range(cons.n_xu):
        fx, fu = cons.Fx[i], cons.Fu[i]
        p = fx @ Bk
        p[k * n_u:(k + 1) * n_u] += fu
        out.append(_scalar_chance(layout, Lw, Zs, p, fx @ Ek, np.zeros(Zs.shape[0]),
                                  fx @ Ak @ x_t, cons.f[i], kappa))
    return out


def build_ca_constraints(stack: StackedModel, instance: ScenarioInstance, k: int, x_t, o_t, gamma_hat,
                         layout: PolicyLayout) -> List[SocConstraint]:
    """Rows on (x_k, o_k), k = 1..N, each with risk epsilon / n_c."""
    cons = instance.constraints
    if cons.n_c == 0:
        return []
    n_x, n_o = stack.n_x, stack.n_o
    kappa = normal_quantile(1 - instance.epsilon / cons.n_c)
    rx = slice(k * n_x, (k + 1) * n_x)
    ro = slice(k * n_o, (k + 1) * n_o)
    Lw, Zs = _noise_factors(stack)
    o_mean = (stack.Aoo[ro] @ o_t + stack.Aox[ro] @ x_t + stack.Go[ro] @ np.atleast_1d(gamma_hat)
              + stack.Lo[ro])
    out = []
    for i in range(cons.n_c):
        gx, go = cons.Gx[i], cons.Go[i]
        p = gx @ stack.B[rx] + go @ stack.Bo[ro]
        qw = gx @ stack.E[rx] + go @ stack.Fw[ro]
        qz = go @ stack.Fz[ro]
        const = gx @ stack.A[rx] @ x_t + go @ o_mean
        out.append(_scalar_chance(layout, Lw, Zs, p, qw, qz, const, cons.g[i], kappa))
    return out


@dataclass
class QuadraticCost:
    """cost(theta) = ||R theta + r||^2."""

    R: np.ndarray
    r: np.ndarray

    def value(self, theta) -> float:
        e = self.R @ theta + self.r
        return float(e @ e)


def _upper_factor(C: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(C).T


def mode_cost(stack: StackedModel, instance: ScenarioInstance, x_t, layout: PolicyLayout) -> QuadraticCost:
    """Expected tracking cost of one mode as a sum of squares in theta."""
    N, n_x = stack.N, stack.n_x
    Ux = np.kron(np.eye(N), _upper_factor(instance.Cx))
    Uu = np.kron(np.eye(N), _upper_factor(instance.Cu))
    plus = slice(n_x, (N + 1) * n_x)
    A1, B1, E1 = stack.A[plus], stack.B[plus], stack.E[plus]
    x_ref = np.tile(instance.x_ref, N)
    u_ref = np.tile(instance.u_ref, N)
    Lw, Zs = _noise_factors(stack)
    n = layout.n

    def rows(m):
        return np.zeros((m, n))

    R_parts, r_parts = [], []
    # means
    Rx = rows(Ux.shape[0])
    Rx[:, layout.sl_h] = Ux @ B1
    R_parts.append(Rx)
    r_parts.append(Ux @ (A1 @ x_t - x_ref))
    Ru = rows(Uu.shape[0])
    Ru[:, layout.sl_h] = Uu
    R_parts.append(Ru)
    r_parts.append(-Uu @ u_ref)
    # x fluctuations: Ux [(B1 Mw + E1) Lw, B1 Mz Zs]
    UB = Ux @ B1
    Rw = rows(Ux.shape[0] * Lw.shape[1])
    Rz = rows(Ux.shape[0] * Zs.shape[1])
    if layout.feedback:
        Rw[:, layout.sl_w] = _sandwich(UB, Lw, layout.idx_w)
        Rz[:, layout.sl_z] = _sandwich(UB, Zs, layout.idx_z)
    R_parts += [Rw, Rz]
    r_parts += [(Ux @ E1 @ Lw).ravel(), np.zeros(Rz.shape[0])]
    # u fluctuations: Uu [Mw Lw, Mz Zs]
    if layout.feedback:
        Rw = rows(Uu.shape[0] * Lw.shape[1])
        Rz = rows(Uu.shape[0] * Zs.shape[1])
        Rw[:, layout.sl_w] = _sandwich(Uu, Lw, layout.idx_w)
        Rz[:, layout.sl_z] = _sandwich(Uu, Zs, layout.idx_z)
        R_parts += [Rw, Rz]
        r_parts += [np.zeros(Rw.shape[0]), np.zeros(Rz.shape[0])]
    return QuadraticCost(np.vstack(R_parts), np.concatenate(r_parts))


def build_cost(stacks: Sequence[StackedModel], mode_belief: ModeBelief, instance: ScenarioInstance, x_t,
               layout: PolicyLayout) -> QuadraticCost:
    parts = [mode_cost(s, instance, x_t, layout) for s in stacks]
    w = np.sqrt(mode_belief.probs)
    return QuadraticCost(np.vstack([wj * c.R for wj, c in zip(w, parts)]),
                         np.concatenate([wj * c.r for wj, c in zip(w, parts)]))


def expected_cost(stack: StackedModel, instance: ScenarioInstance, x_t, o_t, gamma_hat,
                  policy: PolicyParams) -> float:
    """Expected tracking cost by explicit moment propagation (mean and covariance)."""
    N, n_x = stack.N, stack.n_x
    Jw, Jz = stack.noise_maps()
    x_mean, _, u_mean = stack.predict(x_t, o_t, gamma_hat, policy.h, policy.Mw, policy.Mz)
    Du = policy.Mw @ Jw + policy.Mz @ Jz
    Dx = stack.B @ Du + stack.E @ Jw
    plus = slice(n_x, (N + 1) * n_x)
    Cx = np.kron(np.eye(N), instance.Cx)
    Cu = np.kron(np.eye(N), instance.Cu)
    ex = x_mean[plus] - np.tile(instance.x_ref, N)
    eu = u_mean - np.tile(instance.u_ref, N)
    cov_x = Dx[plus] @ stack.Sigma @ Dx[plus].T
    cov_u = Du @ stack.Sigma @ Du.T
    return float(ex @ Cx @ ex + eu @ Cu @ eu + np.trace(Cx @ cov_x) + np.trace(Cu @ cov_u))


@dataclass
class SolveResult:
    policy: Optional[PolicyParams]
    status: str
    value: float
    program: socp.ConeProgram
    solution: socp.Solution
    constraints: list
    layout: PolicyLayout


def _epigraph(cost: QuadraticCost, n: int, squared: bool = False):
    """Cost in cone form over (theta, t), up to a constant.

    By default: minimize t s.t. ||U theta + s|| <= t, which has the argmin of
    the quadratic and resolves theta to the solver tolerance rather than its
    square root. With ``squared``: ||U theta + s||^2 <= t as a rotated cone,
    so t adds linearly to other objective terms (used with soft penalties).
    The cost is normalized by its value at theta = 0 so t stays O(1).
    """
    scale = 1.0 / np.sqrt(cost.r @ cost.r + 1.0)
    H = scale**2 * (cost.R.T @ cost.R)
    g = scale**2 * (cost.R.T @ cost.r)
    try:
        U = np.linalg.cholesky(H).T
        s = solve_triangular(U, g, trans="T")
    except np.linalg.LinAlgError:
        lam, V = np.linalg.eigh(H)
        U = (V * np.sqrt(np.maximum(lam, 0.0))).T
        s = np.linalg.lstsq(U.T, g, rcond=None)[0]
    if not squared:
        a = np.zeros(n + 1)
        a[n] = 1.0
        return socp.Cone(np.hstack([U, np.zeros((n, 1))]), s, a, 0.0)
    # ||y||^2 <= t  <=>  ||[y; (t - 1)/2]|| <= (t + 1)/2
    C = np.zeros((n + 1, n + 1))
    C[:n, :n] = U
    C[n, n] = 0.5
    d = np.concatenate([s, [-0.5]])
    a = np.zeros(n + 1)
    a[n] = 0.5
    return socp.Cone(C, d, a, 0.5)


def _hard_rows(instance: ScenarioInstance) -> np.ndarray:
    """Input-only state/input rows; these stay hard in a recovery solve."""
    return ~np.any(instance.constraints.Fx != 0, axis=1)


def assemble_and_solve(instance: ScenarioInstance, stacks: Sequence[StackedModel], mode_belief: ModeBelief,
                       x_t, o_t, gamma_hats, variant: str = "full", tol: float = 1e-7,
                       soft_penalty: Optional[float] = None, residual_tol: float = RESIDUAL_TOL) -> SolveResult:
    """Build the cone program for one planning step and solve it.

    ``stacks`` must already reflect the variant's gain schedule (see ``plan``);
    here the variant only decides whether feedback gains are decision variables.

    With ``soft_penalty`` set, every chance constraint except the input-only
    rows gets a nonnegative slack charged at that rate (in units of the
    normalized cost). The relaxed program is always feasible when the input
    box is nonempty; it backs the recovery fallback of the simulator.
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    N, n_u = instance.N, instance.ev.n_u
    layout = PolicyLayout(N, n_u, instance.ev.n_x, instance.tv.n_o, feedback=variant != "open_loop")
    x_t = np.asarray(x_t, dtype=float)
    o_t = np.asarray(o_t, dtype=float)
    cons: List[SocConstraint] = []
    hard: List[bool] = []
    input_only = _hard_rows(instance)
    for j, st in enumerate(stacks):
        for k in range(N):
            cons += build_xu_constraints(st, instance, k, x_t, layout)
            hard += list(input_only)
        for k in range(1, N + 1):
            ca = build_ca_constraints(st, instance, k, x_t, o_t, gamma_hats[j], layout)
            cons += ca
            hard += [False] * len(ca)
    cost = build_cost(stacks, mode_belief, instance, x_t, layout)

    n = layout.n
    soft = [] if soft_penalty is None else [i for i, hd in enumerate(hard) if not hd]
    m = len(soft)
    nv = n + m + 1  # theta, slacks, tau
    c = np.zeros(nv)
    c[-1] = 1.0
    c[n:n + m] = 0.0 if soft_penalty is None else soft_penalty
    prog = socp.ConeProgram(nv, c)
    slack_of = {i: n + r for r, i in enumerate(soft)}

    def lift(v):
        out = np.zeros(nv)
        out[:n] = v
        return out

    for i, con in enumerate(cons):
        cn = con.as_cone()
        a = lift(cn.a)
        if i in slack_of:
            a[slack_of[i]] = 1.0
        if not np.any(cn.C):
            # deterministic cone argument: a plain tightened inequality
            prog.add(np.zeros((0, nv)), [], a, cn.b - np.linalg.norm(cn.d))
        else:
            prog.add(np.hstack([cn.C, np.zeros((cn.C.shape[0], m + 1))]), cn.d, a, cn.b)
    for r in range(m):
        prog.add(np.zeros((0, nv)), [], np.eye(nv)[n + r], 0.0)
    epi = _epigraph(cost, n, squared=soft_penalty is not None)
    C = np.zeros((epi.C.shape[0], nv))
    C[:, :n] = epi.C[:, :n]
    C[:, -1] = epi.C[:, n]
    a = np.zeros(nv)
    a[-1] = epi.a[n]
    prog.add(C, epi.d, a, epi.b)

    sol = socp.solve(prog, tol=tol)
    if sol.status != socp.OPTIMAL:
        return SolveResult(None, sol.status, np.nan, prog, sol, cons, layout)
    if sol.residuals.worst > residual_tol:
        return SolveResult(None, socp.NUMERICAL_FAILURE, np.nan, prog, sol, cons, layout)
    theta = sol.x[:n]
    return SolveResult(layout.unpack(theta), socp.OPTIMAL, cost.value(theta), prog, sol, cons, layout)


def extract_control(policy: PolicyParams, n_u: int = 1) -> np.ndarray:
    return np.asarray(policy.h, dtype=float)[:n_u].copy()


def plan(instance: ScenarioInstance, x_t, o_t, gamma_beliefs: Sequence[GammaBelief], mode_belief: ModeBelief,
         prev_h=None, variant: str = "full", t: int = 0, soft_penalty: Optional[float] = None):
    """Linearize, stack and solve one SMPC step. Returns (SolveResult, stacks)."""
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    stacks = build_mode_stacks(instance, x_t, o_t, gamma_beliefs, prev_h, use_kf=variant != "no_kf", t=t)
    res = assemble_and_solve(instance, stacks, mode_belief, x_t, o_t, [b.mean for b in gamma_beliefs], variant,
                             soft_penalty=soft_penalty)
    return res, stacks


def recover(instance: ScenarioInstance, stacks: Sequence[StackedModel], mode_belief: ModeBelief, x_t, o_t,
            gamma_beliefs: Sequence[GammaBelief], variant: str = "full", penalty: float = 1e3) -> SolveResult:
    """Soft-constrained re-solve on the stacks of a failed step."""
    # slacks of order meters next to an O(1) epigraph variable cost some accuracy
    return assemble_and_solve(instance, stacks, mode_belief, x_t, o_t, [b.mean for b in gamma_beliefs], variant,
                              soft_penalty=penalty, residual_tol=RECOVERY_RESIDUAL_TOL)
