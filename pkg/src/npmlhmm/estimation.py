"""EM for HMMs with finite Gaussian-mixture emissions and the adaptive NPMLE.

The complete-data latent variable is the pair (state, mixture component).
The initial law is held fixed at the uniform vector; any strictly positive
initial law gives the same asymptotic contrast, so it is not estimated.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from . import _kernels
from .core import (
    SIGMA_MIN,
    FiniteMixtureDensity,
    HmmModel,
    ObservationSeries,
    ThetaBox,
    ValidationError,
    as_series,
    logsumexp_last,
    make_rng,
    uniform_initial,
)
from .likelihood import scaled_emissions

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
_EMPTY_MASS = 1e-12


class FitFailure(RuntimeError):
    """Every EM run diverged to a zero likelihood."""


@dataclass
class FitConfig:
    max_iter: int = 500
    rel_tol: float = 1e-8
    restarts: int = 5
    component_gain_tol: float = 2.0
    max_components: int = 10
    theta_box: ThetaBox | None = None
    seed: int = 0
    sigma_min: float = SIGMA_MIN
    jitter: float = 0.5

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not self.rel_tol > 0:
            raise ValidationError("rel_tol must be > 0")
        if self.restarts < 1:
            raise ValidationError("restarts must be >= 1")
        if self.max_components < 1:
            raise ValidationError("max_components must be >= 1")

    def box_for(self, obs) -> ThetaBox:
        return self.theta_box if self.theta_box is not None else ThetaBox.from_data(obs, self.sigma_min)


@dataclass
class FitResult:
    model: HmmModel
    loglik: float
    loglik_trace: list
    m_schedule: list
    permutation: np.ndarray
    converged: bool
    n_iter: int
    series_digest: str
    n_floored: int = 0
    restart: int = 0
    stage_logliks: list = field(default_factory=list)
    rejected: "FitResult | None" = None

    @property
    def support_sizes(self) -> tuple:
        return self.model.support_sizes

    @property
    def best_loglik(self) -> float:
        """Largest likelihood among this fit and a rejected larger candidate."""
        if self.rejected is not None:
            return max(self.loglik, self.rejected.loglik)
        return self.loglik


# ---------------------------------------------------------------------------
# single EM iteration


def _e_step(model: HmmModel, obs: np.ndarray):
    comp_logs = [f.component_logpdf(obs) for f in model.densities]
    log_emis = np.column_stack([logsumexp_last(c) for c in comp_logs])
    emis, offset = scaled_emissions(log_emis)
    alpha, scales, total, bad = _kernels.forward(model.initial, model.gamma, emis)
    if bad >= 0:
        raise FloatingPointError(f"zero likelihood at index {bad}")
    beta = _kernels.backward(model.gamma, emis, scales)
    post, xi_sum = _kernels.smooth(alpha, beta, model.gamma, emis, scales)
    return float(total + offset.sum()), post, xi_sum, comp_logs, log_emis


def _floored_weights(mass: np.ndarray, floor: float = WEIGHT_FLOOR) -> tuple[np.ndarray, bool]:
    """Maximise ``sum mass_j log w_j`` over the simplex with ``w_j >= floor``."""
    total = mass.sum()
    w = mass / total
    if np.all(w >= floor):
        return w, False
    low = w < floor
    while True:
        free = ~low
        w = np.where(low, floor, (1.0 - floor * low.sum()) * mass / mass[free].sum())
        new_low = low | (w < floor)
        if np.array_equal(new_low, low):
            return w, True
        low = new_low


def _m_step(model: HmmModel, obs, post, xi_sum, comp_logs, log_emis, box: ThetaBox):
    rows = xi_sum.sum(axis=1)
    gamma = model.gamma.copy()
    ok = rows > 0
    gamma[ok] = xi_sum[ok] / rows[ok, None]
    gamma /= gamma.sum(axis=1, keepdims=True)

    floored = 0
    dens = []
    for k, f in enumerate(model.densities):
        resp = post[:, k, None] * np.exp(comp_logs[k] - log_emis[:, k, None])
        mass = resp.sum(axis=0)
        if mass.sum() <= 0:
            dens.append(f)
            floored += f.n_components
            continue
        w, hit = _floored_weights(mass)
        floored += int(hit)
        means = f.means.copy()
        sds = f.sds.copy()
        live = mass > _EMPTY_MASS
        if np.any(live):
            mu = (resp[:, live] * obs[:, None]).sum(axis=0) / mass[live]
            mu = np.clip(mu, box.mean_lo, box.mean_hi)
            var = (resp[:, live] * (obs[:, None] - mu) ** 2).sum(axis=0) / mass[live]
            means[live] = mu
            sds[live] = np.clip(np.sqrt(var), box.sd_lo, box.sd_hi)
        dens.append(FiniteMixtureDensity(w, means, sds))
    return HmmModel(gamma, model.initial, tuple(dens)), floored


def em_step(model: HmmModel, series, box: ThetaBox | None = None) -> HmmModel:
    """One EM update of transition matrix and all mixture parameters."""
    obs = as_series(series).obs
    if not model.is_finite_mixture:
        raise ValidationError("em_step needs finite-mixture state densities")
    box = box or ThetaBox.from_data(obs)
    ll, post, xi_sum, comp_logs, log_emis = _e_step(model, obs)
    new, floored = _m_step(model, obs, post, xi_sum, comp_logs, log_emis, box)
    if floored:
        log.debug("em_step: %d mixture weights floored at %g", floored, WEIGHT_FLOOR)
    return new


def _run_em(model: HmmModel, obs: np.ndarray, config: FitConfig, box: ThetaBox):
    trace = []
    floored = 0
    converged = False
    for it in range(config.max_iter):
        ll, post, xi_sum, comp_logs, log_emis = _e_step(model, obs)
        trace.append(ll)
        if it > 0 and abs(ll - trace[-2]) <= config.rel_tol * abs(trace[-2]):
            converged = True
            break
        model, fl = _m_step(model, obs, post, xi_sum, comp_logs, log_emis, box)
        floored += fl
    else:
        trace.append(_e_step(model, obs)[0])
    return model, trace, converged, floored


# ---------------------------------------------------------------------------
# initialisation and relabelling


def initialize(series, K: int, m_per_state, seed=None, jitter: float = 0.5, box: ThetaBox | None = None) -> HmmModel:
    """Quantile-slice start: state ``k`` takes the ``k``-th slice of the sorted data.

    Component means sit at within-slice quantiles, optionally jittered by a
    seeded normal draw scaled by ``jitter`` times the slice sd; all sds start
    at the sample sd.
    """
    obs = as_series(series).obs
    m_per_state = _as_m(m_per_state, K)
    box = box or ThetaBox.from_data(obs)
    rng = None
    if seed is not None:
        rng = make_rng(*seed) if isinstance(seed, tuple) else make_rng(seed)
    sd = float(np.clip(obs.std(), box.sd_lo, box.sd_hi))
    dens = []
    for k, chunk in enumerate(np.array_split(np.sort(obs), K)):
        m = m_per_state[k]
        if chunk.size == 0:
            chunk = np.sort(obs)
        means = np.quantile(chunk, (np.arange(m) + 0.5) / m)
        if rng is not None:
            means = means + rng.normal(0.0, jitter * max(chunk.std(), box.sd_lo), m)
        means = np.clip(means, box.mean_lo, box.mean_hi)
        dens.append(FiniteMixtureDensity(np.full(m, 1.0 / m), means, np.full(m, sd)))
    if K == 1:
        gamma = np.ones((1, 1))
    else:
        gamma = np.full((K, K), 0.5 / (K - 1))
        np.fill_diagonal(gamma, 0.5)
    return HmmModel(gamma, uniform_initial(K), tuple(dens))


def canonical_relabel(model: HmmModel, tie_tol: float = 1e-9):
    """Sort states by density mean, then density sd, then original index."""
    keys = [(f.mean, f.sd, i) for i, f in enumerate(model.densities)]

    def cmp(a, b):
        for x, y in zip(a[:2], b[:2]):
            if abs(x - y) > tie_tol:
                return -1 if x < y else 1
        return a[2] - b[2]

    perm = np.array([k[2] for k in sorted(keys, key=functools.cmp_to_key(cmp))], dtype=int)
    return model.permute(perm), perm


def split_heaviest(model: HmmModel, box: ThetaBox, offset: float = 0.5) -> HmmModel:
    """Add one component per state by splitting its heaviest component."""
    dens = []
    for f in model.densities:
        j = int(np.argmax(f.weights))
        mu, sd, w = f.means[j], f.sds[j], f.weights[j]
        means = np.concatenate([np.delete(f.means, j), np.clip([mu - offset * sd, mu + offset * sd], box.mean_lo, box.mean_hi)])
        sds = np.concatenate([np.delete(f.sds, j), [sd, sd]])
        weights = np.concatenate([np.delete(f.weights, j), [w / 2, w / 2]])
        dens.append(FiniteMixtureDensity(weights, means, sds))
    return HmmModel(model.gamma, model.initial, tuple(dens))


def _as_m(m_per_state, K: int) -> list:
    if np.isscalar(m_per_state):
        m_per_state = [int(m_per_state)] * K
    m = [int(x) for x in m_per_state]
    if len(m) != K or min(m) < 1:
        raise ValidationError(f"need {K} support sizes >= 1, got {m}")
    return m


# ---------------------------------------------------------------------------
# fitting drivers


def em_fit(series, K: int, m_per_state, config: FitConfig | None = None, init: HmmModel | None = None) -> FitResult:
    """Best-of-restarts EM fit with fixed support sizes.

    Restart 0 starts from ``init`` when given, otherwise from the unjittered
    quantile start; restarts ``r >= 1`` use seeded jitter on stream
    ``(config.seed, r)``.
    """
    config = config or FitConfig()
    series = as_series(series)
    obs = series.obs
    if obs.size < K:
        raise ValidationError(f"need at least K={K} observations")
    m = _as_m(m_per_state, K)
    box = config.box_for(obs)
    best = None
    for r in range(config.restarts):
        if r == 0 and init is not None:
            start = init
            if [f.n_components for f in start.densities] != m:
                raise ValidationError("warm start support sizes do not match m_per_state")
        else:
            start = initialize(series, K, m, seed=None if r == 0 else (config.seed, r), jitter=config.jitter, box=box)
        try:
            model, trace, converged, floored = _run_em(start, obs, config, box)
        except FloatingPointError as exc:
            log.info("restart %d diverged: %s", r, exc)
            continue
        if best is None or trace[-1] > best[1][-1]:
            best = (model, trace, converged, floored, r)
    if best is None:
        raise FitFailure(f"all {config.restarts} EM restarts reached a zero likelihood")
    model, trace, converged, floored, r = best
    model, perm = canonical_relabel(model)
    return FitResult(
        model=model,
        loglik=trace[-1],
        loglik_trace=trace,
        m_schedule=[max(m)] if len(set(m)) == 1 else [m],
        permutation=perm,
        converged=converged,
        n_iter=len(trace),
        series_digest=series.digest(),
        n_floored=floored,
        restart=r,
        stage_logliks=[trace[-1]],
    )


def npmle_fit(series, K: int, config: FitConfig | None = None, start: FitResult | None = None) -> FitResult:
    """Grow the support of every state density until the likelihood gain stalls.

    Starting from the ``m = 1`` fit (or ``start``), each round splits the
    heaviest component of every state, refits from that warm start, and keeps
    the larger model iff the log-likelihood gain exceeds
    ``config.component_gain_tol``.
    """
    config = config or FitConfig()
    series = as_series(series)
    n = series.n
    box = config.box_for(series.obs)
    current = start if start is not None else em_fit(series, K, 1, config)
    m = max(current.model.support_sizes)
    schedule = list(range(1, m + 1)) if start is None else [m]
    stages = [current.loglik]
    rejected = None
    single = replace(config, restarts=1)
    cap = min(config.max_components, n)
    while m < cap:
        warm = split_heaviest(current.model, box)
        cand = em_fit(series, K, [f.n_components for f in warm.densities], single, init=warm)
        stages.append(cand.loglik)
        if cand.loglik - current.loglik > config.component_gain_tol:
            current = cand
            m = max(cand.model.support_sizes)
            schedule.append(m)
        else:
            rejected = cand
            break
    total = sum(current.model.support_sizes)
    assert total <= K * n + 1, "support exceeds the K*n+1 bound"
    return replace(current, m_schedule=schedule, stage_logliks=stages, rejected=rejected)
