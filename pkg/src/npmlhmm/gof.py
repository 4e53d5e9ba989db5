"""Likelihood-ratio goodness-of-fit test of a Gaussian HMM with parametric-bootstrap calibration."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import HmmModel, ValidationError, as_series, make_rng, simulate
from .estimation import FitConfig, FitFailure, FitResult, em_fit, npmle_fit, split_heaviest

log = logging.getLogger(__name__)

LEVELS = (0.90, 0.95, 0.99)
ALTERNATIVES = ("two-comp", "nonpar")
NEGATIVE_SLACK = 1e-6
MAX_FAILURE_RATE = 0.05
SCHEMA_VERSION = 1


class NegativeStatisticError(ArithmeticError):
    """The alternative fit ended below the nested null fit."""

    def __init__(self, statistic):
        super().__init__(f"LRT statistic {statistic:.6g} below -{NEGATIVE_SLACK}: alternative fit failed")
        self.statistic = statistic


class BootstrapError(RuntimeError):
    """Too many replications failed to fit."""


@dataclass
class GofReport:
    statistic: float
    critical_values: dict
    B: int
    seeds: list
    alternative: str
    n: int
    null_loglik: float
    alt_loglik: float
    n_failed: int = 0
    bootstrap_statistics: list = field(default_factory=list)

    @property
    def decision(self) -> dict:
        return {lvl: ("reject" if self.statistic > cv else "retain") for lvl, cv in self.critical_values.items()}

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "gof_report",
            "alternative": self.alternative,
            "n": self.n,
            "statistic": self.statistic,
            "null_loglik": self.null_loglik,
            "alt_loglik": self.alt_loglik,
            "critical_values": {f"{lvl:.2f}": cv for lvl, cv in self.critical_values.items()},
            "decision": {f"{lvl:.2f}": d for lvl, d in self.decision.items()},
            "B": self.B,
            "n_failed": self.n_failed,
            "seeds": list(self.seeds),
            "bootstrap_statistics": list(self.bootstrap_statistics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GofReport":
        if d.get("schema_version") != SCHEMA_VERSION or d.get("kind") != "gof_report":
            raise ValidationError("not a version-1 goodness-of-fit report")
        return cls(
            statistic=float(d["statistic"]),
            critical_values={float(k): float(v) for k, v in d["critical_values"].items()},
            B=int(d["B"]),
            seeds=[int(s) for s in d["seeds"]],
            alternative=d["alternative"],
            n=int(d["n"]),
            null_loglik=float(d["null_loglik"]),
            alt_loglik=float(d["alt_loglik"]),
            n_failed=int(d.get("n_failed", 0)),
            bootstrap_statistics=[float(s) for s in d.get("bootstrap_statistics", [])],
        )


class CriticalValues(dict):
    """Level -> critical value map that also keeps the bootstrap sample."""

    def __init__(self, values, statistics, seeds, n_failed):
        super().__init__(values)
        self.statistics = statistics
        self.seeds = seeds
        self.n_failed = n_failed


def lrt_statistic(series, null_fit: FitResult, alt_fit: FitResult) -> float:
    """``2 (L_alt - L_null)``, clamped at zero within optimisation slack."""
    series = as_series(series)
    digest = series.digest()
    if null_fit.series_digest != digest or alt_fit.series_digest != digest:
        raise ValidationError("fits were computed on a different series")
    if null_fit.model.K != alt_fit.model.K:
        raise ValidationError("null and alternative have different numbers of states")
    stat = 2.0 * (alt_fit.loglik - null_fit.loglik)
    if stat < -NEGATIVE_SLACK:
        raise NegativeStatisticError(stat)
    return max(stat, 0.0)


def _embed(model: HmmModel, box) -> HmmModel:
    # duplicate the heaviest component in place: same density, one more component
    return split_heaviest(model, box, offset=0.0)


def fit_null(series, K: int, config: FitConfig) -> FitResult:
    return em_fit(series, K, 1, config)


def fit_alternative(series, K: int, alternative: str, null_fit: FitResult, config: FitConfig) -> FitResult:
    """Alternative fit warm-started from the null.

    The nonparametric alternative grows from the best two-component fit, so
    its likelihood never falls below the two-component one.
    """
    if alternative not in ALTERNATIVES:
        raise ValidationError(f"alternative must be one of {ALTERNATIVES}")
    series = as_series(series)
    box = config.box_for(series.obs)
    two = em_fit(series, K, 2, config, init=split_heaviest(null_fit.model, box))
    if two.loglik < null_fit.loglik - NEGATIVE_SLACK:
        log.info("two-component fit below null (%.6g); refitting from the embedded null", two.loglik - null_fit.loglik)
        two = em_fit(series, K, 2, replace(config, restarts=1), init=_embed(null_fit.model, box))
    if alternative == "two-comp":
        return two
    grown = npmle_fit(series, K, config, start=two)
    return replace(grown, m_schedule=[1] + grown.m_schedule)


def _statistic(series, K, alternative, config):
    null = fit_null(series, K, config)
    alt = fit_alternative(series, K, alternative, null, config)
    try:
        return lrt_statistic(series, null, alt), null, alt
    except NegativeStatisticError:
        box = config.box_for(series.obs)
        alt = em_fit(series, K, 2, replace(config, restarts=1), init=_embed(null.model, box))
        if alternative == "nonpar":
            alt = npmle_fit(series, K, config, start=alt)
        return lrt_statistic(series, null, alt), null, alt


def replication_seed(master_seed: int, index: int) -> int:
    return int(make_rng(master_seed, index).integers(2**63 - 1))


def _one_replication(args):
    model, n, K, alternative, config, seed = args
    series = simulate(model, n, seed)
    try:
        stat, _, _ = _statistic(series, K, alternative, replace(config, seed=seed))
    except (FitFailure, FloatingPointError, NegativeStatisticError, np.linalg.LinAlgError) as exc:
        log.warning("replication with seed %d failed: %s", seed, exc)
        return seed, None
    return seed, stat


def _run_replications(model, n, K, alternative, config, master_seed, count, jobs):
    """``count`` successful statistics, replacing failures up to the allowed rate."""
    jobs = max(1, int(jobs or 1))
    allowed = int(np.floor(MAX_FAILURE_RATE * count))
    results, failures, next_index = [], 0, 0
    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    try:
        while len(results) < count:
            want = count - len(results)
            tasks = [
                (model, n, K, alternative, config, replication_seed(master_seed, i))
                for i in range(next_index, next_index + want)
            ]
            next_index += want
            out = list(pool.map(_one_replication, tasks)) if pool else [_one_replication(t) for t in tasks]
            for seed, stat in out:
                if stat is None:
                    failures += 1
                else:
                    results.append((seed, stat))
            if failures > allowed:
                raise BootstrapError(
                    f"{failures} of {next_index} replications failed to fit (limit {allowed}); "
                    "check the null model and FitConfig"
                )
    finally:
        if pool:
            pool.shutdown()
    return [s for s, _ in results], [st for _, st in results], failures


def stationary_version(model: HmmModel) -> HmmModel:
    """The same parameters started from the stationary law (for simulation)."""
    return HmmModel.stationary_model(model.gamma, model.densities)


def bootstrap_critical_values(
    null_model: HmmModel,
    n: int,
    B: int,
    alternative: str = "two-comp",
    config: FitConfig | None = None,
    seed: int = 0,
    jobs: int = 1,
    levels=LEVELS,
) -> CriticalValues:
    """Empirical quantiles of the LRT under series simulated from ``null_model``."""
    config = config or FitConfig()
    if B < 100:
        raise ValidationError(f"B={B} is below the minimum of 100 bootstrap replications")
    if alternative not in ALTERNATIVES:
        raise ValidationError(f"alternative must be one of {ALTERNATIVES}")
    if any(f.n_components != 1 for f in null_model.densities):
        raise ValidationError("null model must have Gaussian (single-component) states")
    seeds, stats, failed = _run_replications(
        stationary_version(null_model), n, null_model.K, alternative, config, seed, B, jobs
    )
    ordered = np.sort(stats)
    values = {float(lvl): float(np.quantile(ordered, lvl)) for lvl in levels}
    return CriticalValues(values, [float(s) for s in stats], seeds, failed)


def power_simulation(
    true_model: HmmModel,
    null_family_K: int,
    critical_values: dict,
    R: int,
    n: int,
    alternative: str = "two-comp",
    config: FitConfig | None = None,
    seed: int = 1,
    jobs: int = 1,
) -> dict:
    """Rejection frequency per level over ``R`` series from ``true_model``."""
    config = config or FitConfig()
    if R < 1:
        raise ValidationError("R must be at least 1")
    if R < 50:
        log.warning("R=%d gives a very coarse rejection rate", R)
    _, stats, _ = _run_replications(true_model, n, null_family_K, alternative, config, seed, R, jobs)
    stats = np.asarray(stats)
    return {float(lvl): float(np.mean(stats > cv)) for lvl, cv in critical_values.items()}


def run_gof(
    series,
    K: int,
    alternative: str = "two-comp",
    B: int = 200,
    config: FitConfig | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> GofReport:
    """Observed statistic plus bootstrap critical values from the fitted null."""
    config = config or FitConfig()
    series = as_series(series)
    if B < 100:
        raise ValidationError(f"B={B} is below the minimum of 100 bootstrap replications")
    stat, null, alt = _statistic(series, K, alternative, config)
    cv = bootstrap_critical_values(null.model, series.n, B, alternative, config, seed, jobs)
    return GofReport(
        statistic=stat,
        critical_values=dict(cv),
        B=B,
        seeds=cv.seeds,
        alternative=alternative,
        n=series.n,
        null_loglik=null.loglik,
        alt_loglik=alt.loglik,
        n_failed=cv.n_failed,
        bootstrap_statistics=cv.statistics,
    )


def default_jobs() -> int:
    return os.cpu_count() or 1
