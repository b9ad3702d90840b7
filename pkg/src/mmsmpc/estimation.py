"""Between-step inference: Kalman update of the feature-weight belief and the
Bayesian update of mode probabilities."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .models import ContractError, check_psd

JITTER = 1e-9
PROB_FLOOR = 1e-6


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class GammaBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).ravel()
        cov = check_psd("belief covariance", self.cov)
        if cov.shape != (mean.size, mean.size):
            raise ContractError("belief mean and covariance disagree in size")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class ModeBelief:
    probs: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.probs, dtype=float))
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ContractError(f"mode probabilities must be a distribution, got {p}")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, M: int) -> "ModeBelief":
        return cls(np.full(M, 1.0 / M))


def _cholesky(S: np.ndarray, what: str) -> np.ndarray:
    """Cholesky factor of a symmetrized S; the jitter is only added when S is not numerically PD."""
    S = symmetrize(np.atleast_2d(S))
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(S + JITTER * np.eye(S.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"{what} is singular") from exc


def _solve_spd(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    c = _cholesky(S, "innovation covariance")
    return np.linalg.solve(c.T, np.linalg.solve(c, rhs))


def kalman_gain(Sigma: np.ndarray, G: np.ndarray, Sigma_v: np.ndarray) -> np.ndarray:
    """K = Sigma G^T (Sigma_v + G Sigma G^T)^-1."""
    S = Sigma_v + G @ Sigma @ G.T
    return _solve_spd(S, G @ Sigma).T


def weight_kf_update(belief: GammaBelief, G, y, Sigma_v, Sigma_n):
    """Measurement update with y = G gamma + v, followed by the random-walk step.

    Returns the new belief and the gain K.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    Sigma_v = np.atleast_2d(Sigma_v)
    Sigma_n = np.atleast_2d(Sigma_n)
    K = kalman_gain(belief.cov, G, Sigma_v)
    W = np.eye(belief.mean.size) - K @ G
    mean = W @ belief.mean + K @ y
    cov = symmetrize(W @ belief.cov + Sigma_n)
    # guard tiny negative eigenvalues produced by roundoff
    lam, V = np.linalg.eigh(cov)
    if lam.min() < 0:
        cov = symmetrize((V * np.maximum(lam, 0.0)) @ V.T)
    return GammaBelief(mean, cov), K


def innovation_output(o_k, o_km1, x_km1, Abar, Q, P, l) -> np.ndarray:
    """y = o_k - (Abar + Q) o_{k-1} - P x_{k-1} - l."""
    return (np.asarray(o_k, float) - (np.asarray(Abar) + np.asarray(Q)) @ np.asarray(o_km1, float)
            - np.asarray(P) @ np.asarray(x_km1, float) - np.asarray(l, float))


def gaussian_pdf(r: np.ndarray, S: np.ndarray) -> float:
    r = np.atleast_1d(np.asarray(r, dtype=float))
    c = _cholesky(S, "likelihood covariance")
    u = np.linalg.solve(c, r)
    log_det = 2.0 * np.log(np.diag(c)).sum()
    return float(np.exp(-0.5 * (u @ u + log_det + r.size * np.log(2 * np.pi))))


def mode_likelihood(o_t, o_prev, Abar_prev, G_prev, belief_prev: GammaBelief, Sigma_v) -> float:
    """Density of the observed TV transition under one mode.

    ``G_prev`` is Bbar Phi^i(x_{t-1}, o_{t-1}); the residual
    o_t - Abar o_{t-1} - G gamma_hat is scored against N(0, Sigma_v + G Sigma G^T).
    """
    G = np.atleast_2d(G_prev)
    r = np.asarray(o_t, float) - np.asarray(Abar_prev) @ np.asarray(o_prev, float) - G @ belief_prev.mean
    S = np.atleast_2d(Sigma_v) + G @ belief_prev.cov @ G.T
    return gaussian_pdf(r, S)


def mode_posterior_update(belief: ModeBelief, likelihoods) -> ModeBelief:
    lik = np.atleast_1d(np.asarray(likelihoods, dtype=float))
    if lik.shape != belief.probs.shape:
        raise ContractError("one likelihood per mode is required")
    if np.any(lik < 0) or not np.all(np.isfinite(lik)):
        raise ContractError(f"likelihoods must be finite and non-negative, got {lik}")
    post = lik * belief.probs
    total = post.sum()
    if not total > 0:
        warnings.warn("all mode likelihoods vanished; keeping prior mode belief", RuntimeWarning)
        return belief
    post = np.maximum(post / total, PROB_FLOOR)
    return ModeBelief(post / post.sum())
