"""Closed-loop simulation of the longitudinal stop scenario and the ablation grid."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import socp
from .estimation import GammaBelief, ModeBelief, innovation_output, mode_likelihood, mode_posterior_update, \
    weight_kf_update
from .models import ContractError, LongitudinalParams, longitudinal_instance, tv_step, ev_step
from .prediction import Reference, linearize, shifted_inputs
from .smpc import VARIANTS, extract_control, plan, recover

log = logging.getLogger(__name__)

STOP_POS_TOL = 1.0
STOP_VEL_TOL = 0.1
SAFETY_TOL = 1e-6
# hold: re-apply the previous input; recover: soft-constrained re-solve
FALLBACKS = ("hold", "recover")
RECOVERY_PENALTY = 1e3


@dataclass(frozen=True)
class ScenarioConfig:
    sigma: int = 1
    gamma0: float = 1.0
    x0: tuple = (0.0, 11.0)
    o0: tuple = (-9.0, 15.0)
    T: int = 100
    seed: int = 0
    variant: str = "full"
    params: LongitudinalParams = field(default_factory=LongitudinalParams)
    walk_gamma: bool = True
    gamma_hat0: float = 0.0
    Sigma0: float = 1.0
    fallback: str = "hold"

    def __post_init__(self):
        if self.T < 1:
            raise ContractError("T must be >= 1")
        if self.sigma not in (1, 2):
            raise ContractError(f"sigma must be 1 or 2, got {self.sigma}")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.fallback not in FALLBACKS:
            raise ContractError(f"fallback must be one of {FALLBACKS}, got {self.fallback!r}")
        longitudinal_instance(self.params)  # surfaces parameter errors before any run

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        params = LongitudinalParams.from_dict(d.pop("params", {}))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        for k in ("x0", "o0"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(params=params, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"] = self.params.to_dict()
        d["x0"], d["o0"] = list(self.x0), list(self.o0)
        return d


@dataclass
class SimLog:
    """Per-step record. ``x``, ``o`` and ``gamma`` carry one extra terminal row."""

    x: np.ndarray           # (T+1, n_x)
    o: np.ndarray           # (T+1, n_o)
    u: np.ndarray           # (T, n_u)
    gamma: np.ndarray       # (T+1, n_gamma) true weight
    gamma_hat: np.ndarray   # (T, M, n_gamma)
    gamma_cov: np.ndarray   # (T, M, n_gamma, n_gamma)
    mode_probs: np.ndarray  # (T, M)
    status: List[str]
    fallback: np.ndarray    # (T,) bool
    margin: np.ndarray      # (T+1,) min over collision rows of g - Gx x - Go o

    @property
    def T(self) -> int:
        return self.u.shape[0]

    def csv_header(self) -> List[str]:
        n_x, n_o, n_u = self.x.shape[1], self.o.shape[1], self.u.shape[1]
        M, n_g = self.gamma_hat.shape[1], self.gamma_hat.shape[2]
        cols = ["t"] + [f"x{i}" for i in range(n_x)] + [f"o{i}" for i in range(n_o)]
        cols += [f"u{i}" for i in range(n_u)] + [f"gamma{i}" for i in range(n_g)]
        for j in range(M):
            cols += [f"gamma_hat_m{j + 1}_{i}" for i in range(n_g)]
            cols += [f"gamma_var_m{j + 1}_{i}" for i in range(n_g)]
        cols += [f"p_m{j + 1}" for j in range(M)] + ["status", "fallback", "margin"]
        return cols

    def csv_rows(self):
        for t in range(self.T):
            row = [t, *self.x[t], *self.o[t], *self.u[t], *self.gamma[t]]
            for j in range(self.gamma_hat.shape[1]):
                row += list(self.gamma_hat[t, j]) + list(np.diag(self.gamma_cov[t, j]))
            row += list(self.mode_probs[t]) + [self.status[t], int(self.fallback[t]), self.margin[t]]
            yield row

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.csv_header())
            for row in self.csv_rows():
                writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])

    def to_json(self) -> dict:
        steps = []
        for t in range(self.T):
            steps.append(dict(t=t, x=self.x[t].tolist(), o=self.o[t].tolist(), u=self.u[t].tolist(),
                              gamma=self.gamma[t].tolist(), gamma_hat=self.gamma_hat[t].tolist(),
                              gamma_cov=self.gamma_cov[t].tolist(), mode_probs=self.mode_probs[t].tolist(),
                              status=self.status[t], fallback=bool(self.fallback[t]),
                              margin=float(self.margin[t])))
        final = dict(x=self.x[-1].tolist(), o=self.o[-1].tolist(), gamma=self.gamma[-1].tolist(),
                     margin=float(self.margin[-1]))
        return dict(steps=steps, final=final)


def noise_sequences(config: ScenarioConfig):
    """Seeded (w, v, n) draws for every step, from one counter-based generator."""
    p = config.params
    rng = np.random.Generator(np.random.Philox(key=config.seed))
    T = config.T
    w = rng.standard_normal((T, 2)) * np.sqrt(np.asarray(p.Sigma_w, dtype=float))
    v = rng.standard_normal((T, 2)) * np.sqrt(np.asarray(p.Sigma_v, dtype=float))
    n = rng.standard_normal((T, 1)) * np.sqrt(float(p.Sigma_n))
    return w, v, n


def true_gamma_path(config: ScenarioConfig) -> np.ndarray:
    _, _, n = noise_sequences(config)
    if not config.walk_gamma:
        n = np.zeros_like(n)
    return config.gamma0 + np.vstack([np.zeros((1, 1)), np.cumsum(n, axis=0)])


def true_tv_control(instance, x, o, gamma, sigma: int) -> np.ndarray:
    """TV acceleration gamma * Phi^sigma(x, o); ``sigma`` is 1-based."""
    return instance.tv.mode(sigma - 1).features(x, o) @ np.atleast_1d(gamma)


def _collision_margin(instance, x, o) -> float:
    c = instance.constraints
    if c.n_c == 0:
        return np.inf
    return float(np.min(c.g - c.Gx @ x - c.Go @ o))


def _measure(instance, t, x_prev, o_prev, o_t, gamma_beliefs, mode_belief):
    """Mode likelihoods with the previous beliefs, then per-mode weight updates."""
    tv = instance.tv
    lik = np.empty(tv.M)
    new_beliefs = []
    for j, b in enumerate(gamma_beliefs):
        ref = Reference(np.asarray([x_prev]), np.asarray([o_prev]), np.zeros((1, instance.ev.n_u)))
        lin = linearize(replace(instance, N=1), ref, j, b.mean, t - 1)
        lik[j] = mode_likelihood(o_t, o_prev, lin.Abar[0], lin.G[0], b, tv.Sigma_v)
        y = innovation_output(o_t, o_prev, x_prev, lin.Abar[0], lin.Q[0], lin.P[0], lin.l[0])
        nb, _ = weight_kf_update(b, lin.G[0], y, tv.Sigma_v, tv.Sigma_n)
        new_beliefs.append(nb)
    return new_beliefs, mode_posterior_update(mode_belief, lik)


def run_closed_loop(config: ScenarioConfig) -> SimLog:
    instance = longitudinal_instance(config.params)
    ev, tv = instance.ev, instance.tv
    T, M = config.T, tv.M
    w, v, _ = noise_sequences(config)
    gamma_path = true_gamma_path(config)

    x = np.zeros((T + 1, ev.n_x))
    o = np.zeros((T + 1, tv.n_o))
    u = np.zeros((T, ev.n_u))
    gh = np.zeros((T, M, tv.n_gamma))
    gc = np.zeros((T, M, tv.n_gamma, tv.n_gamma))
    probs = np.zeros((T, M))
    status: List[str] = []
    fallback = np.zeros(T, dtype=bool)
    margin = np.zeros(T + 1)

    x[0], o[0] = config.x0, config.o0
    beliefs = [GammaBelief([config.gamma_hat0] * tv.n_gamma, config.Sigma0 * np.eye(tv.n_gamma))] * M
    mode_belief = ModeBelief.uniform(M)
    prev_h = None
    u_prev = np.zeros(ev.n_u)
    for t in range(T):
        if t > 0:
            beliefs, mode_belief = _measure(instance, t, x[t - 1], o[t - 1], o[t], beliefs, mode_belief)
        res, stacks = plan(instance, x[t], o[t], beliefs, mode_belief, prev_h, config.variant, t)
        if res.status == socp.OPTIMAL:
            u[t] = extract_control(res.policy, ev.n_u)
            prev_h = res.policy.h
        else:
            fallback[t] = True
            rec = None
            if config.fallback == "recover":
                rec = recover(instance, stacks, mode_belief, x[t], o[t], beliefs, config.variant, RECOVERY_PENALTY)
            if rec is not None and rec.status == socp.OPTIMAL:
                u[t] = extract_control(rec.policy, ev.n_u)
                prev_h = rec.policy.h
            else:
                u[t] = u_prev
                if prev_h is not None:
                    prev_h = shifted_inputs(prev_h, instance.N, ev.n_u).ravel()
            log.debug("t=%d solver status %s, fallback u=%s", t, res.status, u[t])
        u_prev = u[t]
        status.append(res.status)
        gh[t] = [b.mean for b in beliefs]
        gc[t] = [b.cov for b in beliefs]
        probs[t] = mode_belief.probs
        margin[t] = _collision_margin(instance, x[t], o[t])

        x[t + 1] = ev_step(ev, t, x[t], u[t], w[t])
        o[t + 1] = tv_step(tv, config.sigma - 1, t, x[t], o[t], gamma_path[t], v[t])
    margin[T] = _collision_margin(instance, x[T], o[T])
    return SimLog(x, o, u, gamma_path, gh, gc, probs, status, fallback, margin)


def evaluate_success(log_: SimLog, config: ScenarioConfig):
    """(success, feasible_fraction) of one closed-loop run."""
    p = config.params
    s_T, v_T = log_.x[-1]
    so_T, vo_T = log_.o[-1]
    ok = abs(s_T - p.s_f) <= STOP_POS_TOL and abs(v_T) <= STOP_VEL_TOL
    ok = ok and bool(np.all(log_.margin >= -SAFETY_TOL))
    if config.sigma == 2:
        ok = ok and abs(s_T - so_T - p.d_safe) <= STOP_POS_TOL and abs(vo_T) <= STOP_VEL_TOL
    feasible = sum(s == socp.OPTIMAL for s in log_.status) / log_.T
    return bool(ok), feasible


def grid_initial_conditions(x_center=(0.0, 11.0), o_center=(-9.0, 14.0), delta=1.0):
    """The 2^4 corners of the boxes centred on x_center and o_center."""
    out = []
    for ds, dv, dso, dvo in itertools.product((-delta, delta), repeat=4):
        out.append(((x_center[0] + ds, x_center[1] + dv), (o_center[0] + dso, o_center[1] + dvo)))
    return out


def _run_metrics(config: ScenarioConfig):
    lg = run_closed_loop(config)
    return evaluate_success(lg, config)


def batch_grid(base: ScenarioConfig, variants: Sequence[str] = VARIANTS, sigmas=(1, 2),
               initial_conditions=None, workers: Optional[int] = None):
    """S% and F% per (variant, sigma) over the initial-condition grid.

    Run i of the grid uses seed base.seed + i, so every variant sees the same
    noise realizations.
    """
    ics = grid_initial_conditions() if initial_conditions is None else list(initial_conditions)
    jobs = []
    for variant, sigma in itertools.product(variants, sigmas):
        for i, (x0, o0) in enumerate(ics):
            jobs.append(replace(base, variant=variant, sigma=sigma, x0=tuple(x0), o0=tuple(o0), seed=base.seed + i))
    if workers == 1 or len(jobs) == 1:
        results = [_run_metrics(c) for c in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_metrics, jobs))
    table = []
    for variant, sigma in itertools.product(variants, sigmas):
        sel = [r for c, r in zip(jobs, results) if c.variant == variant and c.sigma == sigma]
        table.append(dict(variant=variant, sigma=sigma,
                          S_pct=100.0 * np.mean([s for s, _ in sel]),
                          F_pct=100.0 * np.mean([f for _, f in sel])))
    return table


def write_table(table, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "sigma", "S_pct", "F_pct"])
        writer.writeheader()
        for row in table:
            writer.writerow(row)


def summary(log_: SimLog, config: ScenarioConfig) -> dict:
    success, feasible = evaluate_success(log_, config)
    return dict(success=success, F_pct=100.0 * feasible, sigma=config.sigma, variant=config.variant,
                seed=config.seed, x_T=log_.x[-1].tolist(), o_T=log_.o[-1].tolist(),
                min_margin=float(np.min(log_.margin)), final_mode_probs=log_.mode_probs[-1].tolist())


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
