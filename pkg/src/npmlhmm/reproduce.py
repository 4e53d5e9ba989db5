"""Monte-Carlo relative-error and transition-error tables for the simulation scenarios."""
from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import HmmModel, ValidationError, simulate
from .estimation import FitConfig, FitFailure, em_fit, npmle_fit, split_heaviest
from .gof import replication_seed
from .scenarios import ScenarioSpec

log = logging.getLogger(__name__)

ESTIMATOR_NAMES = ("nonpar", "2-comp", "Gauss")


def fit_estimators(series, K: int, names, config: FitConfig) -> dict:
    """Fit the requested estimators; the richer ones warm-start from the Gaussian fit."""
    out = {}
    gauss = em_fit(series, K, 1, config)
    if "Gauss" in names:
        out["Gauss"] = gauss
    if "2-comp" in names:
        box = config.box_for(series.obs)
        out["2-comp"] = em_fit(series, K, 2, config, init=split_heaviest(gauss.model, box))
    if "nonpar" in names:
        out["nonpar"] = npmle_fit(series, K, config, start=gauss)
    return out


def relabel_to_truth(model: HmmModel, truth: HmmModel, grid: np.ndarray) -> np.ndarray:
    """Permutation ``p`` (estimated state ``p[k]`` plays true state ``k``) minimising L1 density distance."""
    est = np.array([f.pdf(grid) for f in model.densities])
    tru = np.array([f.pdf(grid) for f in truth.densities])
    dx = grid[1] - grid[0]
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(truth.K)):
        cost = np.abs(est[list(perm)] - tru).sum() * dx
        if cost < best_cost:
            best, best_cost = np.array(perm), cost
    return best


def truth_grid(truth: HmmModel, n_points: int = 400) -> np.ndarray:
    means = np.array([f.mean for f in truth.densities])
    sds = np.array([f.sd for f in truth.densities])
    return np.linspace((means - 4 * sds).min(), (means + 4 * sds).max(), n_points)


def replication_errors(model: HmmModel, truth: HmmModel, eval_grid, f0_values, grid):
    """Relative errors x100 at the evaluation points and per-state transition errors x100."""
    perm = relabel_to_truth(model, truth, grid)
    rel = []
    for k, pts in enumerate(eval_grid):
        fhat = model.densities[perm[k]].pdf(np.asarray(pts))
        rel.append(np.abs(fhat - f0_values[k]) / f0_values[k] * 100)
    g = model.gamma[np.ix_(perm, perm)]
    trans = np.abs(g - truth.gamma).mean(axis=1) * 100
    return np.concatenate(rel), trans


@dataclass
class RelativeErrorTable:
    scenario: str
    estimators: tuple
    eval_grid: tuple
    values: np.ndarray  # estimators x points, mean relative error x100
    transition: np.ndarray  # estimators x K, mean absolute transition error x100
    replications: int
    n: int
    n_failed: dict

    def value(self, estimator: str, state: int, y: float) -> float:
        """Entry for 0-based ``state`` at evaluation point ``y``."""
        offset = sum(len(p) for p in self.eval_grid[:state])
        j = offset + list(self.eval_grid[state]).index(y)
        return float(self.values[self.estimators.index(estimator), j])

    def transition_error(self, estimator: str, state: int) -> float:
        return float(self.transition[self.estimators.index(estimator), state])

    def write_csv(self, out_dir) -> tuple:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rel_path = out / f"{self.scenario}_relative_errors_n{self.n}.csv"
        with open(rel_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state", "y"] + list(self.estimators))
            j = 0
            for k, pts in enumerate(self.eval_grid):
                for y in pts:
                    w.writerow([k + 1, y] + [f"{self.values[e, j]:.2f}" for e in range(len(self.estimators))])
                    j += 1
        tr_path = out / f"{self.scenario}_transition_errors_n{self.n}.csv"
        with open(tr_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state"] + list(self.estimators))
            for k in range(self.transition.shape[1]):
                w.writerow([k + 1] + [f"{self.transition[e, k]:.2f}" for e in range(len(self.estimators))])
        return rel_path, tr_path


def _replicate(args):
    spec, n, names, config, seed = args
    truth = spec.model
    series = simulate(truth, n, seed)
    grid = truth_grid(truth)
    f0 = [np.asarray(f.pdf(np.asarray(p))) for f, p in zip(truth.densities, spec.eval_grid)]
    out = {}
    try:
        fits = fit_estimators(series, truth.K, names, replace(config, seed=seed))
    except (FitFailure, FloatingPointError) as exc:
        log.warning("replication seed %d failed: %s", seed, exc)
        return out
    for name, fit in fits.items():
        out[name] = replication_errors(fit.model, truth, spec.eval_grid, f0, grid)
    return out


def reproduce_tables(
    spec: ScenarioSpec,
    n: int | None = None,
    replications: int | None = None,
    seed: int = 0,
    config: FitConfig | None = None,
    estimators=None,
    jobs: int = 1,
) -> RelativeErrorTable:
    config = config or FitConfig()
    n = n or spec.n
    replications = replications or spec.replications
    if replications < 10:
        raise ValidationError("need at least 10 replications")
    names = tuple(estimators or spec.estimators)
    tasks = [(spec, n, names, config, replication_seed(seed, r)) for r in range(replications)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_replicate, tasks))
    else:
        results = [_replicate(t) for t in tasks]
    P = sum(len(p) for p in spec.eval_grid)
    values = np.full((len(names), P), np.nan)
    trans = np.full((len(names), spec.model.K), np.nan)
    failed = {}
    for e, name in enumerate(names):
        got = [r[name] for r in results if name in r]
        failed[name] = replications - len(got)
        if got:
            values[e] = np.mean([g[0] for g in got], axis=0)
            trans[e] = np.mean([g[1] for g in got], axis=0)
    return RelativeErrorTable(spec.name, names, spec.eval_grid, values, trans, replications, n, failed)
