"""The two simulation scenarios and their evaluation grids."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CompoundDensity, ContinuousMixtureTruth, FiniteMixtureDensity, HmmModel

GAMMA_3STATE = np.array([
    [0.5, 0.25, 0.25],
    [0.4, 0.4, 0.2],
    [0.2, 0.2, 0.6],
])


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    model: HmmModel
    eval_grid: tuple
    estimators: tuple
    n: int = 1000
    replications: int = 10000

    @property
    def K(self) -> int:
        return self.model.K


def scenario_a() -> ScenarioSpec:
    """Skewed 3-component state 1, Beta/Uniform continuous mixtures in states 2 and 3."""
    f1 = FiniteMixtureDensity([0.33, 0.33, 0.34], [-10.0, -7.5, -4.0], [2.0, 2.0, 2.0])
    f2 = ContinuousMixtureTruth(a=2, b=2, loc=0.0, scale=1.0, sd_lo=1.0, sd_hi=4.0)
    f3 = ContinuousMixtureTruth(a=2, b=11, loc=5.0, scale=33.0, sd_lo=1.4, sd_hi=1.6)
    grid = (
        (-15.45, -13.77, -11.22, -9.05, -7.26, -5.3, -2.86, -0.21, 1.56),
        (-9.36, -6.36, -2.71, -0.68, 0.5, 1.67, 3.71, 7.36, 10.36),
        (2.27, 3.74, 6.0, 7.99, 9.66, 11.61, 14.93, 20.17, 22.0),
    )
    return ScenarioSpec(
        "scenario-a",
        HmmModel.stationary_model(GAMMA_3STATE, (f1, f2, f3)),
        grid,
        ("nonpar", "2-comp", "Gauss"),
    )


def scenario_b() -> ScenarioSpec:
    """Scale-separated states with a linearly dependent third density."""
    f1 = ContinuousMixtureTruth(a=2, b=11, loc=-3.0, scale=20.0, sd_lo=0.9, sd_hi=1.5)
    f2 = ContinuousMixtureTruth(a=2, b=11, loc=-3.0, scale=20.0, sd_lo=4.0, sd_hi=6.0)
    f3 = CompoundDensity((0.4, 0.6), (f1, f2))
    grid = (
        (-4.31, -2.62, -1.25, -0.17, 1.07, 3.12, 6.35),
        (-11.94, -6.67, -2.69, 0.07, 2.87, 7.05, 13.66),
        (-11.01, -5.06, -1.8, -0.08, 1.89, 5.57, 12.21),
    )
    return ScenarioSpec(
        "scenario-b",
        HmmModel.stationary_model(GAMMA_3STATE, (f1, f2, f3)),
        grid,
        ("nonpar", "Gauss"),
    )


SCENARIOS = {"scenario-a": scenario_a, "scenario-b": scenario_b}


def get_scenario(name: str) -> ScenarioSpec:
    try:
        return SCENARIOS[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
