"""Vehicle and driver models: ego vehicle (EV), multi-modal target vehicle (TV)
and the random-walk feature weights, plus the longitudinal stop scenario."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

MatrixSeq = Union[np.ndarray, Callable[[int], np.ndarray]]

PSD_FLOOR = -1e-10


class ContractError(ValueError):
    """Raised when inputs violate an operation's dimensional or value contract."""


def check_psd(name: str, S: np.ndarray) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ContractError(f"{name} must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ContractError(f"{name} has non-finite entries")
    if not np.allclose(S, S.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ContractError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(S).min() < PSD_FLOOR:
        raise ContractError(f"{name} is not positive semidefinite")
    return S


def _at(seq: MatrixSeq, t: int) -> np.ndarray:
    return np.asarray(seq(t) if callable(seq) else seq, dtype=float)


def _vec(name: str, a, n: int) -> np.ndarray:
    a = np.atleast_1d(np.asarray(a, dtype=float)).ravel()
    if a.shape != (n,):
        raise ContractError(f"{name} must have length {n}, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} has non-finite entries")
    return a


@dataclass(frozen=True)
class EvModel:
    """x+ = A_t x + B u + w,  w ~ N(0, Sigma_w)."""

    A_seq: MatrixSeq
    B: np.ndarray
    Sigma_w: np.ndarray

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Sigma_w", check_psd("Sigma_w", self.Sigma_w))
        if self.Sigma_w.shape[0] != B.shape[0]:
            raise ContractError("Sigma_w and B disagree on n_x")

    @property
    def n_x(self) -> int:
        return self.B.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def A(self, t: int) -> np.ndarray:
        A = _at(self.A_seq, t)
        if A.shape != (self.n_x, self.n_x):
            raise ContractError(f"A_{t} has shape {A.shape}, expected {(self.n_x, self.n_x)}")
        return A


def fd_feature_jacobians(feature_eval, x, o) -> np.ndarray:
    """Central differences of each feature column w.r.t. the joint state [x; o].

    Returns an array of shape (n_gamma, n_in, n_x + n_o).
    """
    x = np.asarray(x, dtype=float)
    o = np.asarray(o, dtype=float)
    z0 = np.concatenate([x, o])
    Phi0 = np.atleast_2d(feature_eval(x, o))
    jac = np.zeros((Phi0.shape[1], Phi0.shape[0], z0.size))
    for i in range(z0.size):
        step = 1e-6 * max(1.0, abs(z0[i]))
        zp, zm = z0.copy(), z0.copy()
        zp[i] += step
        zm[i] -= step
        Fp = np.atleast_2d(feature_eval(zp[: x.size], zp[x.size:]))
        Fm = np.atleast_2d(feature_eval(zm[: x.size], zm[x.size:]))
        jac[:, :, i] = ((Fp - Fm) / (2 * step)).T
    return jac


@dataclass(frozen=True)
class TvMode:
    """One driver hypothesis: a feature matrix Phi(x, o) of shape (n_in, n_gamma).

    ``feature_jacobians(x, o)`` returns d Phi[:, i] / d[x; o] stacked as
    (n_gamma, n_in, n_x + n_o). When omitted, central differences are used.
    """

    feature_eval: Callable[[np.ndarray, np.ndarray], np.ndarray]
    feature_jacobians: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    label: str = ""

    def features(self, x, o) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.feature_eval(np.asarray(x, float), np.asarray(o, float)), dtype=float))

    def jacobians(self, x, o) -> np.ndarray:
        if self.feature_jacobians is None:
            return fd_feature_jacobians(self.feature_eval, x, o)
        return np.asarray(self.feature_jacobians(np.asarray(x, float), np.asarray(o, float)), dtype=float)


@dataclass(frozen=True)
class TvModel:
    """o+ = Abar_t o + Bbar_t Phi^sigma(x, o) gamma + v,  gamma+ = gamma + n."""

    Abar_seq: MatrixSeq
    Bbar_seq: MatrixSeq
    modes: Sequence[TvMode]
    Sigma_v: np.ndarray
    Sigma_n: np.ndarray

    def __post_init__(self):
        if len(self.modes) < 1:
            raise ContractError("a TV model needs at least one mode")
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "Sigma_v", check_psd("Sigma_v", self.Sigma_v))
        object.__setattr__(self, "Sigma_n", check_psd("Sigma_n", self.Sigma_n))

    @property
    def n_o(self) -> int:
        return self.Sigma_v.shape[0]

    @property
    def n_gamma(self) -> int:
        return self.Sigma_n.shape[0]

    @property
    def M(self) -> int:
        return len(self.modes)

    def Abar(self, t: int) -> np.ndarray:
        return _at(self.Abar_seq, t)

    def Bbar(self, t: int) -> np.ndarray:
        return np.atleast_2d(_at(self.Bbar_seq, t))

    def mode(self, j: int) -> TvMode:
        if not 0 <= j < self.M:
            raise ContractError(f"mode index {j} out of range for M={self.M}")
        return self.modes[j]


@dataclass(frozen=True)
class ConstraintSet:
    """State-input rows Fx x+ + Fu u <= f and collision rows Gx x + Go o <= g."""

    Fx: np.ndarray
    Fu: np.ndarray
    f: np.ndarray
    Gx: np.ndarray
    Go: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        for name in ("Fx", "Fu", "Gx", "Go"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("f", "g"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.n_xu < 1 and self.n_c < 1:
            raise ContractError("constraint set is empty")
        if not all(np.all(np.isfinite(getattr(self, k))) for k in ("Fx", "Fu", "f", "Gx", "Go", "g")):
            raise ContractError("constraint entries must be finite")
        if self.Fx.shape[0] != self.n_xu or self.Fu.shape[0] != self.n_xu:
            raise ContractError("xu rows are inconsistent")
        if self.Gx.shape[0] != self.n_c or self.Go.shape[0] != self.n_c:
            raise ContractError("collision rows are inconsistent")

    @property
    def n_xu(self) -> int:
        return self.f.size

    @property
    def n_c(self) -> int:
        return self.g.size


@dataclass(frozen=True)
class ScenarioInstance:
    ev: EvModel
    tv: TvModel
    constraints: ConstraintSet
    N: int
    epsilon: float
    Cx: np.ndarray
    Cu: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray

    def __post_init__(self):
        if self.N < 1:
            raise ContractError("horizon N must be >= 1")
        counts = [n for n in (self.constraints.n_xu, self.constraints.n_c) if n > 0]
        if not 0.0 < self.epsilon <= min(counts) / 2:
            raise ContractError(f"epsilon={self.epsilon} outside (0, {min(counts) / 2}]")
        for name, n in (("Cx", self.ev.n_x), ("Cu", self.ev.n_u)):
            C = check_psd(name, getattr(self, name))
            if C.shape != (n, n) or np.linalg.eigvalsh(C).min() <= 0:
                raise ContractError(f"{name} must be {n}x{n} positive definite")
            object.__setattr__(self, name, C)
        object.__setattr__(self, "x_ref", _vec("x_ref", self.x_ref, self.ev.n_x))
        object.__setattr__(self, "u_ref", _vec("u_ref", self.u_ref, self.ev.n_u))
        c = self.constraints
        if c.Fx.shape[1] != self.ev.n_x or c.Fu.shape[1] != self.ev.n_u:
            raise ContractError("xu rows do not match EV dimensions")
        if c.n_c and (c.Gx.shape[1] != self.ev.n_x or c.Go.shape[1] != self.tv.n_o):
            raise ContractError("collision rows do not match EV/TV dimensions")


def ev_step(ev: EvModel, t: int, x, u, w) -> np.ndarray:
    x = _vec("x", x, ev.n_x)
    u = _vec("u", u, ev.n_u)
    w = _vec("w", w, ev.n_x)
    return ev.A(t) @ x + ev.B @ u + w


def tv_step(tv: TvModel, mode: int, t: int, x, o, gamma, v) -> np.ndarray:
    """Exact TV step under driver hypothesis ``mode`` (0-based)."""
    m = tv.mode(mode)
    o = _vec("o", o, tv.n_o)
    gamma = _vec("gamma", gamma, tv.n_gamma)
    v = _vec("v", v, tv.n_o)
    return tv.Abar(t) @ o + tv.Bbar(t) @ (m.features(x, o) @ gamma) + v


def gamma_step(gamma, n) -> np.ndarray:
    return np.asarray(gamma, dtype=float) + np.asarray(n, dtype=float)


@dataclass(frozen=True)
class LongitudinalParams:
    """Parameters of the longitudinal stop-sign scenario (defaults give the reference instance)."""

    dt: float = 0.1
    d_safe: float = 7.0
    s_f: float = 50.0
    N: int = 12
    epsilon: float = 0.1
    Sigma_w: tuple = (1e-3, 1e-2)
    Sigma_v: tuple = (1e-2, 1e-1)
    Sigma_n: float = 0.5
    v_max: float = 14.0
    v_min: float = 0.0
    a_max: float = 3.5
    a_min: float = -6.0
    Cx: tuple = (50.0, 20.0)
    Cu: float = 10.0
    k1_s: float = 1.0
    k1_v: float = 6.0
    k2_s: float = 1e-2
    k2_v: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "LongitudinalParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown parameters: {sorted(unknown)}")
        vals = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**vals)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


def double_integrator(dt: float):
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.0], [dt]])
    return A, B


def stop_feature(p: LongitudinalParams):
    """Mode 1: EV-agnostic PD law stopping the TV at s_f - d_safe."""

    def phi(x, o):
        return np.array([[p.k1_s * (p.s_f - p.d_safe - o[0]) + p.k1_v * (0.0 - o[1])]])

    def jac(x, o):
        return np.array([[[0.0, 0.0, -p.k1_s, -p.k1_v]]])

    return TvMode(phi, jac, label="stop")


def follow_feature(p: LongitudinalParams):
    """Mode 2: PD car-following law keeping d_safe behind the EV."""

    def phi(x, o):
        return np.array([[p.k2_s * (x[0] - p.d_safe - o[0]) + p.k2_v * (x[1] - o[1])]])

    def jac(x, o):
        return np.array([[[p.k2_s, p.k2_v, -p.k2_s, -p.k2_v]]])

    return TvMode(phi, jac, label="follow")


def longitudinal_instance(p: LongitudinalParams = LongitudinalParams()) -> ScenarioInstance:
    if p.dt <= 0:
        raise ContractError(f"dt must be positive, got {p.dt}")
    A, B = double_integrator(p.dt)
    ev = EvModel(A, B, np.diag(p.Sigma_w))
    tv = TvModel(A, B, [stop_feature(p), follow_feature(p)],
                 np.diag(p.Sigma_v), np.atleast_2d(p.Sigma_n))
    # rows act on (x_{k+1}, u_k): s <= s_f, v <= v_max, -v <= -v_min, a <= a_max, -a <= -a_min
    Fx = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 0.0], [0.0, 0.0]])
    Fu = np.array([[0.0], [0.0], [0.0], [1.0], [-1.0]])
    f = np.array([p.s_f, p.v_max, -p.v_min, p.a_max, -p.a_min])
    # s^o - s <= -d_safe
    cons = ConstraintSet(Fx, Fu, f, Gx=[[-1.0, 0.0]], Go=[[1.0, 0.0]], g=[-p.d_safe])
    return ScenarioInstance(ev, tv, cons, N=p.N, epsilon=p.epsilon,
                            Cx=np.diag(p.Cx), Cu=np.atleast_2d(p.Cu),
                            x_ref=[p.s_f, 0.0], u_ref=[0.0])
