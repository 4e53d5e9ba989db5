"""Exact HMM likelihood: scaled forward recursion, smoothing, path-sum oracle and KL contrast."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .core import HmmModel, ObservationSeries, as_series, simulate

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10**7


class GuardError(RuntimeError):
    """Exact enumeration refused because the problem is too large."""


@dataclass
class ForwardPass:
    loglik: float
    alpha: np.ndarray
    scales: np.ndarray
    emis: np.ndarray
    bad_index: int

    @property
    def finite(self) -> bool:
        return self.bad_index < 0


@dataclass
class Posteriors:
    gamma_t: np.ndarray
    xi_t: np.ndarray
    loglik: float


def scaled_emissions(log_emis: np.ndarray):
    """Row-normalised emission matrix and the log offsets that were removed."""
    offset = log_emis.max(axis=1)
    offset = np.where(np.isfinite(offset), offset, 0.0)
    return np.exp(log_emis - offset[:, None]), offset


def forward_pass(model: HmmModel, series, log_emis: np.ndarray | None = None) -> ForwardPass:
    obs = as_series(series).obs
    if log_emis is None:
        log_emis = model.log_emissions(obs)
    emis, offset = scaled_emissions(log_emis)
    alpha, scales, total, bad = _kernels.forward(model.initial, model.gamma, emis)
    if bad >= 0:
        log.debug("zero predictive density at t=%d", bad)
        return ForwardPass(-np.inf, alpha, scales, emis, int(bad))
    return ForwardPass(float(total + offset.sum()), alpha, scales, emis, -1)


def log_likelihood(model: HmmModel, series) -> float:
    """``log g_n(y_1^n)``; ``-inf`` when no state path has positive density."""
    return forward_pass(model, series).loglik


def forward_backward(model: HmmModel, series) -> Posteriors:
    fp = forward_pass(model, series)
    if not fp.finite:
        raise FloatingPointError(f"zero likelihood at index {fp.bad_index}")
    beta = _kernels.backward(model.gamma, fp.emis, fp.scales)
    gamma_t, _ = _kernels.smooth(fp.alpha, beta, model.gamma, fp.emis, fp.scales)
    xi = (
        fp.alpha[:-1, :, None]
        * model.gamma[None]
        * (fp.emis[1:] * beta[1:])[:, None, :]
        / fp.scales[1:, None, None]
    )
    return Posteriors(gamma_t, xi, fp.loglik)


def brute_force_log_density(model: HmmModel, series) -> float:
    """Sum over all ``K**n`` state paths; test oracle only."""
    obs = as_series(series).obs
    K, n = model.K, obs.size
    if K**n > BRUTE_FORCE_LIMIT:
        raise GuardError(f"K**n = {K}**{n} exceeds the enumeration limit {BRUTE_FORCE_LIMIT}")
    log_emis = model.log_emissions(obs)
    with np.errstate(divide="ignore"):
        log_init = np.log(model.initial)
        log_gamma = np.log(model.gamma)
    # enumerate in chunks: a prefix of `head` coordinates times all tails
    head = max(0, n - int(np.floor(np.log(1e5) / np.log(max(K, 2)))))
    tails = np.array(list(itertools.product(range(K), repeat=n - head)), dtype=np.intp).reshape(-1, n - head)
    chunks = []
    for prefix in itertools.product(range(K), repeat=head):
        paths = np.hstack([np.tile(np.array(prefix, dtype=np.intp), (tails.shape[0], 1)), tails])
        lp = log_init[paths[:, 0]] + log_emis[np.arange(n), paths].sum(axis=1)
        if n > 1:
            lp = lp + log_gamma[paths[:, :-1], paths[:, 1:]].sum(axis=1)
        chunks.append(logsumexp(lp))
    return float(logsumexp(chunks))


def kl_divergence_estimate(model0: HmmModel, model: HmmModel, n: int = 100_000, seed: int = 0) -> float:
    """``n^-1 {L_n(model0) - L_n(model)}`` on one series simulated from ``model0``."""
    if np.any(model0.initial <= 0) or np.any(model.initial <= 0):
        raise ValueError("both models need strictly positive initial distributions")
    series = simulate(model0, n, seed)
    l0 = log_likelihood(model0, series)
    l1 = log_likelihood(model, series)
    if l1 == -np.inf:
        return np.inf
    return (l0 - l1) / n

