"""Persistence: observation CSVs, versioned model files and key=value configs."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import FiniteMixtureDensity, HmmModel, ObservationSeries, ThetaBox, ValidationError
from .estimation import FitConfig, FitResult

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# observation series


def write_series_csv(series: ObservationSeries, path, include_states: bool = True) -> None:
    """Header ``t,y[,state]``; ``t`` and ``state`` are 1-based."""
    with_states = include_states and series.states is not None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "y", "state"] if with_states else ["t", "y"])
        for t, y in enumerate(series.obs):
            row = [t + 1, repr(float(y))]
            if with_states:
                row.append(int(series.states[t]) + 1)
            w.writerow(row)


def read_series_csv(path) -> ObservationSeries:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header not in (["t", "y"], ["t", "y", "state"]):
        raise ValidationError(f"{path}: header must be 't,y' or 't,y,state', got {','.join(header)}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise ValidationError(f"{path}: no observations")
    try:
        t = np.array([int(r[0]) for r in body])
        y = np.array([float(r[1]) for r in body])
        states = np.array([int(r[2]) - 1 for r in body]) if len(header) == 3 else None
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"{path}: malformed row ({exc})") from None
    if not np.array_equal(t, np.arange(1, t.size + 1)):
        raise ValidationError(f"{path}: column t must run 1..n")
    return ObservationSeries(y, states)


# ---------------------------------------------------------------------------
# models


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def config_to_dict(config: FitConfig) -> dict:
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name == "theta_box":
            v = None if v is None else {k: _finite(getattr(v, k)) for k in ("mean_lo", "mean_hi", "sd_lo", "sd_hi")}
        out[f.name] = _finite(v)
    return out


def model_to_dict(model: HmmModel, fit: FitResult | None = None, config: FitConfig | None = None, **extra) -> dict:
    if not model.is_finite_mixture:
        raise ValidationError("only finite Gaussian-mixture models can be saved")
    d = {
        "schema_version": SCHEMA_VERSION,
        "kind": "hmm_model",
        "K": model.K,
        "gamma": model.gamma.tolist(),
        "initial": model.initial.tolist(),
        "stationary": model.stationary,
        "states": [
            {"weights": f.weights.tolist(), "means": f.means.tolist(), "sds": f.sds.tolist()}
            for f in model.densities
        ],
    }
    if fit is not None:
        d["fit"] = {
            "loglik": fit.loglik,
            "m_schedule": [m if isinstance(m, int) else list(m) for m in fit.m_schedule],
            "permutation": [int(p) for p in fit.permutation],
            "converged": bool(fit.converged),
            "n_iter": int(fit.n_iter),
            "series_digest": fit.series_digest,
            "stage_logliks": [float(x) for x in fit.stage_logliks],
        }
    if config is not None:
        d["config"] = config_to_dict(config)
        d["seed"] = config.seed
    d.update(extra)
    return d


def model_from_dict(d: dict) -> HmmModel:
    if d.get("schema_version") != SCHEMA_VERSION or d.get("kind") != "hmm_model":
        raise ValidationError(f"unsupported model file (schema_version={d.get('schema_version')!r})")
    try:
        dens = tuple(FiniteMixtureDensity(s["weights"], s["means"], s["sds"]) for s in d["states"])
        model = HmmModel(np.array(d["gamma"]), np.array(d["initial"]), dens, stationary=bool(d.get("stationary")))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model file: missing {exc}") from None
    if model.K != d.get("K", model.K):
        raise ValidationError("K field disagrees with the stored parameters")
    return model


def save_model(path, model: HmmModel, fit: FitResult | None = None, config: FitConfig | None = None, **extra) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, fit, config, **extra), indent=2) + "\n")


def load_model(path):
    """Returns ``(model, metadata dict)``."""
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not a model file ({exc})") from None
    return model_from_dict(d), d


def save_json(path, d: dict) -> None:
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


# ---------------------------------------------------------------------------
# key=value configuration

_FIT_KEYS = {f.name for f in fields(FitConfig)} - {"theta_box"}
_BOX_KEYS = ("mean_lo", "mean_hi", "sd_lo", "sd_hi")
_RUN_KEYS = {"B": int, "jobs": int, "K": int, "n": int, "reps": int}


def parse_config_text(text: str, source: str = "<config>"):
    """Parse ``key = value`` lines (``#`` starts a comment).

    Returns ``(FitConfig, run_options)``; unknown keys are an error.
    """
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ValidationError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    types = {f.name: f.type for f in fields(FitConfig)}
    fit_kw, box_kw, run = {}, {}, {}
    for key, value in raw.items():
        if key not in _FIT_KEYS and key not in _BOX_KEYS and key not in _RUN_KEYS:
            raise ValidationError(f"{source}: unknown key {key!r}")
        try:
            if key in _FIT_KEYS:
                fit_kw[key] = int(value) if types[key] in ("int", int) else float(value)
            elif key in _BOX_KEYS:
                box_kw[key] = float(value)
            else:
                run[key] = _RUN_KEYS[key](value)
        except ValueError:
            raise ValidationError(f"{source}: bad value for {key!r}: {value!r}") from None
    if box_kw:
        missing = [k for k in ("mean_lo", "mean_hi") if k not in box_kw]
        if missing:
            raise ValidationError(f"{source}: theta box needs {missing}")
        fit_kw["theta_box"] = ThetaBox(**box_kw)
    return FitConfig(**fit_kw), run


def read_config(path):
    return parse_config_text(Path(path).read_text(), str(path))
