"""Model representation, assumption checks, densities and exact simulation.

States are indexed ``0..K-1`` internally; files written by the CLI use
``1..K``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import NamedTuple

import numpy as np
from scipy import special, stats
from scipy.sparse.csgraph import connected_components

from ._kernels import sample_chain

SIGMA_MIN = 0.05
STOCHASTIC_TOL = 1e-12
RANK_RTOL = 1e-8

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def logsumexp_last(x: np.ndarray) -> np.ndarray:
    """``log(sum(exp(x), axis=-1))`` without scipy's per-call overhead."""
    m = x.max(axis=-1)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(x - m[..., None]).sum(axis=-1))


class ValidationError(ValueError):
    """Raised when a model or input violates its contract."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox generator for ``seed`` on the sub-stream ``stream``.

    Philox is counter based; distinct ``stream`` tuples map to independent
    ``SeedSequence`` spawn keys, so replication ``i`` of a run seeded with
    ``s`` always uses ``make_rng(s, i)`` regardless of scheduling order.
    """
    seq = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))


# ---------------------------------------------------------------------------
# validation helpers


def check_probability_vector(p, name: str = "probability vector") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError(f"{name} must be a non-empty 1-d array")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > STOCHASTIC_TOL * max(1, p.size):
        raise ValidationError(f"{name} sums to {p.sum()!r}, not 1")
    return p


def check_transition_matrix(gamma) -> np.ndarray:
    """Validate a row-stochastic ``K x K`` matrix and return it as an array."""
    g = np.asarray(gamma, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 1:
        raise ValidationError(f"transition matrix must be square, got shape {g.shape}")
    if not np.all(np.isfinite(g)) or np.any(g < 0) or np.any(g > 1):
        raise ValidationError("transition matrix entries must lie in [0, 1]")
    dev = np.abs(g.sum(axis=1) - 1.0)
    if np.any(dev > STOCHASTIC_TOL * max(1, g.shape[0])):
        raise ValidationError(f"rows of the transition matrix do not sum to 1 (max deviation {dev.max():.3g})")
    return g


def is_irreducible(gamma) -> bool:
    g = np.asarray(gamma) > 0
    n_comp, _ = connected_components(g, directed=True, connection="strong")
    return n_comp == 1


def period(gamma) -> int:
    """Period of an irreducible chain from BFS levels: gcd of level[u] + 1 - level[v] over edges."""
    adj = np.asarray(gamma) > 0
    K = adj.shape[0]
    level = np.full(K, -1)
    level[0] = 0
    queue = [0]
    while queue:
        u = queue.pop(0)
        for v in np.flatnonzero(adj[u]):
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(v)
    diffs = [level[u] + 1 - level[v] for u, v in zip(*np.nonzero(adj)) if level[u] >= 0 and level[v] >= 0]
    return int(reduce(math.gcd, (abs(int(d)) for d in diffs), 0))


def is_ergodic(gamma) -> bool:
    """Irreducible and aperiodic, decided on the zero pattern only."""
    return is_irreducible(gamma) and period(gamma) == 1


def stationary_distribution(gamma) -> np.ndarray:
    """Unique ``pi`` with ``pi @ gamma == pi`` for an ergodic chain."""
    g = check_transition_matrix(gamma)
    if not is_ergodic(g):
        raise ValidationError("no unique stationary distribution: chain is not ergodic")
    K = g.shape[0]
    # replace one balance equation by the normalisation constraint
    a = (g.T - np.eye(K))
    a[-1, :] = 1.0
    rhs = np.zeros(K)
    rhs[-1] = 1.0
    pi = np.linalg.solve(a, rhs)
    # one step of refinement keeps |pi G - pi| at machine precision
    pi = pi @ g
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


# ---------------------------------------------------------------------------
# densities


class GaussianComponent(NamedTuple):
    mean: float
    sd: float


@dataclass(frozen=True)
class ThetaBox:
    """Compact parameter box for Gaussian components."""

    mean_lo: float
    mean_hi: float
    sd_lo: float = SIGMA_MIN
    sd_hi: float = np.inf

    @classmethod
    def from_data(cls, obs, sigma_min: float = SIGMA_MIN) -> "ThetaBox":
        obs = np.asarray(obs, dtype=float)
        sd = float(obs.std())
        return cls(float(obs.min()) - 1.0, float(obs.max()) + 1.0, sigma_min, max(2.0 * sd, sigma_min))

    def contains(self, means, sds) -> bool:
        means = np.asarray(means)
        sds = np.asarray(sds)
        return bool(
            np.all(means >= self.mean_lo) and np.all(means <= self.mean_hi)
            and np.all(sds >= self.sd_lo) and np.all(sds <= self.sd_hi)
        )


@dataclass(frozen=True, eq=False)
class FiniteMixtureDensity:
    """``sum_j w_j N(mean_j, sd_j^2)`` -- a discrete mixing measure over Gaussian parameters."""

    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_1d(np.asarray(self.means, dtype=float))
        sd = np.atleast_1d(np.asarray(self.sds, dtype=float))
        if not (w.shape == mu.shape == sd.shape) or w.ndim != 1 or w.size == 0:
            raise ValidationError("weights, means and sds must be 1-d arrays of equal length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > STOCHASTIC_TOL * max(1, w.size):
            raise ValidationError("mixture weights must be positive and sum to 1")
        if np.any(sd <= 0) or not np.all(np.isfinite(mu)):
            raise ValidationError("component sds must be positive and means finite")
        for name, arr in (("weights", w), ("means", mu), ("sds", sd)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def gaussian(cls, mean: float, sd: float) -> "FiniteMixtureDensity":
        return cls([1.0], [mean], [sd])

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(float(m), float(s)) for m, s in zip(self.means, self.sds)]

    @property
    def mean(self) -> float:
        return float(self.weights @ self.means)

    @property
    def sd(self) -> float:
        second = self.weights @ (self.sds**2 + self.means**2)
        return float(math.sqrt(max(second - self.mean**2, 0.0)))

    def component_logpdf(self, y) -> np.ndarray:
        """``log w_j + log phi_j(y)`` with shape ``y.shape + (m,)``."""
        y = np.asarray(y, dtype=float)[..., None]
        z = (y - self.means) / self.sds
        return np.log(self.weights) - np.log(self.sds) - _LOG_SQRT_2PI - 0.5 * z * z

    def logpdf(self, y) -> np.ndarray:
        return logsumexp_last(self.component_logpdf(y))

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def cdf(self, y):
        y = np.asarray(y, dtype=float)[..., None]
        return special.ndtr((y - self.means) / self.sds) @ self.weights

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.choice(self.n_components, size=size, p=self.weights)
        return self.means[comp] + self.sds[comp] * rng.standard_normal(size)

    def mix(self, other: "FiniteMixtureDensity", p: float) -> "FiniteMixtureDensity":
        """``p * self + (1 - p) * other`` as a single finite mixture."""
        return FiniteMixtureDensity(
            np.concatenate([p * self.weights, (1 - p) * other.weights]),
            np.concatenate([self.means, other.means]),
            np.concatenate([self.sds, other.sds]),
        )

    def __eq__(self, other):
        if not isinstance(other, FiniteMixtureDensity):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.sds, other.sds)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ContinuousMixtureTruth:
    """Gaussian location-scale mixture with a continuous mixing law.

    The mean is ``loc + scale * Beta(a, b)`` and the sd is
    ``Uniform(sd_lo, sd_hi)``, independent. Densities are evaluated by
    tensor-product Gauss-Legendre quadrature over both mixing variables.
    """

    a: float
    b: float
    loc: float
    scale: float
    sd_lo: float
    sd_hi: float
    quadrature_nodes: int = 200

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0 or self.scale <= 0:
            raise ValidationError("Beta shape parameters and scale must be positive")
        if not 0 < self.sd_lo < self.sd_hi:
            raise ValidationError("need 0 < sd_lo < sd_hi")
        if self.quadrature_nodes < 16:
            raise ValidationError("quadrature_nodes must be at least 16")

    def _nodes(self):
        x, wx = np.polynomial.legendre.leggauss(self.quadrature_nodes)
        u = 0.5 * (x + 1.0)
        mu = self.loc + self.scale * u
        w_mu = 0.5 * wx * stats.beta.pdf(u, self.a, self.b)
        sd = self.sd_lo + (self.sd_hi - self.sd_lo) * u
        w_sd = 0.5 * wx
        return mu, w_mu, sd, w_sd

    def _integrate(self, y, kernel):
        y = np.asarray(y, dtype=float)
        mu, w_mu, sd, w_sd = self._nodes()
        flat = y.ravel()
        out = np.empty(flat.size)
        step = 256  # keeps the (chunk, nodes, nodes) buffer small
        for i in range(0, flat.size, step):
            z = (flat[i:i + step, None, None] - mu[:, None]) / sd[None, :]
            out[i:i + step] = np.einsum("...ij,i,j->...", kernel(z, sd[None, :]), w_mu, w_sd)
        return out.reshape(y.shape)

    def pdf(self, y):
        return self._integrate(y, lambda z, s: np.exp(-0.5 * z * z) / (s * math.sqrt(2 * math.pi)))

    def logpdf(self, y):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(y))

    def cdf(self, y):
        return self._integrate(y, lambda z, s: special.ndtr(z))

    @property
    def mean(self) -> float:
        return self.loc + self.scale * self.a / (self.a + self.b)

    @property
    def sd(self) -> float:
        a, b = self.a, self.b
        var_mu = self.scale**2 * a * b / ((a + b) ** 2 * (a + b + 1))
        e_s2 = (self.sd_hi**3 - self.sd_lo**3) / (3 * (self.sd_hi - self.sd_lo))
        return math.sqrt(var_mu + e_s2)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        mu = self.loc + self.scale * rng.beta(self.a, self.b, size)
        sd = rng.uniform(self.sd_lo, self.sd_hi, size)
        return mu + sd * rng.standard_normal(size)


@dataclass(frozen=True, eq=False)
class CompoundDensity:
    """Finite convex combination of arbitrary densities (``pdf``/``cdf``/``sample``)."""

    weights: tuple
    parts: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.parts) != w.size or np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise ValidationError("compound weights must be positive, sum to 1 and match parts")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "parts", tuple(self.parts))

    def pdf(self, y):
        return sum(w * p.pdf(y) for w, p in zip(self.weights, self.parts))

    def logpdf(self, y):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(y))

    def cdf(self, y):
        return sum(w * p.cdf(y) for w, p in zip(self.weights, self.parts))

    @property
    def mean(self) -> float:
        return sum(w * p.mean for w, p in zip(self.weights, self.parts))

    @property
    def sd(self) -> float:
        m = self.mean
        second = sum(w * (p.sd**2 + p.mean**2) for w, p in zip(self.weights, self.parts))
        return math.sqrt(max(second - m * m, 0.0))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        which = rng.choice(len(self.parts), size=size, p=np.asarray(self.weights))
        out = np.empty(size)
        for i, part in enumerate(self.parts):
            idx = np.flatnonzero(which == i)
            out[idx] = part.sample(rng, idx.size)
        return out


def density_eval(f, y):
    """Evaluate a state density at ``y`` (scalar or array)."""
    val = f.pdf(y)
    return float(val) if np.ndim(val) == 0 else val


def truth_density_eval(t: ContinuousMixtureTruth, y):
    return density_eval(t, y)


# ---------------------------------------------------------------------------
# model container


@dataclass(frozen=True, eq=False)
class HmmModel:
    """Transition matrix, initial law and one density per state."""

    gamma: np.ndarray
    initial: np.ndarray
    densities: tuple
    stationary: bool = False

    def __post_init__(self):
        g = check_transition_matrix(self.gamma).copy()
        lam = check_probability_vector(self.initial, "initial distribution").copy()
        dens = tuple(self.densities)
        if len(dens) != g.shape[0] or lam.size != g.shape[0]:
            raise ValidationError(
                f"K mismatch: gamma is {g.shape[0]}x{g.shape[0]}, "
                f"{lam.size} initial probabilities, {len(dens)} densities"
            )
        if self.stationary:
            pi = stationary_distribution(g)
            if np.max(np.abs(pi - lam)) > 1e-10:
                raise ValidationError("model flagged stationary but initial != stationary distribution")
        g.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "initial", lam)
        object.__setattr__(self, "densities", dens)

    @classmethod
    def stationary_model(cls, gamma, densities) -> "HmmModel":
        return cls(gamma, stationary_distribution(gamma), densities, stationary=True)

    @property
    def K(self) -> int:
        return self.gamma.shape[0]

    @property
    def is_finite_mixture(self) -> bool:
        return all(isinstance(f, FiniteMixtureDensity) for f in self.densities)

    @property
    def support_sizes(self) -> tuple:
        return tuple(getattr(f, "n_components", -1) for f in self.densities)

    def permute(self, perm) -> "HmmModel":
        """Relabel so that new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm, dtype=int)
        return HmmModel(
            self.gamma[np.ix_(perm, perm)],
            self.initial[perm],
            tuple(self.densities[i] for i in perm),
            stationary=self.stationary,
        )

    def log_emissions(self, obs) -> np.ndarray:
        """``n x K`` matrix of ``log f_k(y_t)``."""
        obs = np.asarray(obs, dtype=float)
        return np.column_stack([f.logpdf(obs) for f in self.densities])


@dataclass(frozen=True, eq=False)
class ObservationSeries:
    obs: np.ndarray
    states: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=float).ravel()
        if obs.size < 1:
            raise ValidationError("series must contain at least one observation")
        if not np.all(np.isfinite(obs)):
            raise ValidationError("observations must be finite")
        obs.setflags(write=False)
        object.__setattr__(self, "obs", obs)
        if self.states is not None:
            st = np.asarray(self.states, dtype=np.int64).ravel()
            if st.shape != obs.shape or np.any(st < 0):
                raise ValidationError("true states must be non-negative and match the series length")
            st.setflags(write=False)
            object.__setattr__(self, "states", st)

    def __len__(self):
        return self.obs.size

    @property
    def n(self) -> int:
        return self.obs.size

    def digest(self) -> str:
        import hashlib

        return hashlib.sha1(self.obs.tobytes()).hexdigest()


def as_series(data) -> ObservationSeries:
    return data if isinstance(data, ObservationSeries) else ObservationSeries(data)


# ---------------------------------------------------------------------------
# assumption checks


@dataclass
class ValidationReport:
    full_rank: bool
    ergodic: bool
    densities_distinct: bool
    stationary_ok: bool
    singular_values: np.ndarray
    period: int | None
    distinct_witnesses: dict = field(default_factory=dict)
    identical_pairs: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.full_rank and self.ergodic and self.densities_distinct and self.stationary_ok

    def summary(self) -> str:
        lines = [
            f"full rank: {self.full_rank}  (singular values {np.array2string(self.singular_values, precision=4)})",
            f"ergodic: {self.ergodic}" + ("" if self.period is None else f"  (period {self.period})"),
            f"distinct state densities: {self.densities_distinct}",
        ]
        if self.identical_pairs:
            lines.append(f"  indistinguishable pairs: {[(i + 1, j + 1) for i, j in self.identical_pairs]}")
        lines.append(f"initial law consistent with stationarity flag: {self.stationary_ok}")
        return "\n".join(lines)


def default_distinctness_grid(densities, obs=None, n_points: int = 401) -> np.ndarray:
    if obs is not None:
        obs = np.asarray(obs, dtype=float)
        lo, hi, sd = obs.min(), obs.max(), obs.std()
    else:
        means = np.array([f.mean for f in densities])
        sd = max(f.sd for f in densities)
        lo, hi = means.min(), means.max()
    return np.linspace(lo - 3 * sd, hi + 3 * sd, n_points)


def validate_model(model: HmmModel, tol: float = RANK_RTOL, grid=None, obs=None) -> ValidationReport:
    """Check full rank, ergodicity and distinct state densities; report witnesses."""
    g = model.gamma
    sv = np.linalg.svd(g, compute_uv=False)
    full_rank = bool(sv[-1] > tol * sv[0])
    irreducible = is_irreducible(g)
    per = period(g) if irreducible else None
    ergodic = irreducible and per == 1
    if grid is None:
        grid = default_distinctness_grid(model.densities, obs)
    vals = np.array([np.asarray(f.pdf(grid)) for f in model.densities])
    witnesses, identical = {}, []
    for i in range(model.K):
        for j in range(i + 1, model.K):
            diff = np.abs(vals[i] - vals[j])
            t = int(np.argmax(diff))
            if diff[t] > tol:
                witnesses[(i, j)] = float(grid[t])
            else:
                identical.append((i, j))
    stationary_ok = True
    if model.stationary:
        stationary_ok = ergodic and bool(np.max(np.abs(stationary_distribution(g) - model.initial)) <= 1e-10)
    return ValidationReport(full_rank, ergodic, not identical, stationary_ok, sv, per, witnesses, identical)


def simulate(model: HmmModel, n: int, seed: int) -> ObservationSeries:
    """Draw ``(X_t, Y_t)`` for ``t = 1..n``; bit-identical for equal arguments."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    rng = make_rng(seed)
    u = rng.random(n)
    states = sample_chain(np.cumsum(model.initial), np.cumsum(model.gamma, axis=1), u)
    obs = np.empty(n)
    for k, f in enumerate(model.densities):
        idx = np.flatnonzero(states == k)
        if idx.size:
            obs[idx] = f.sample(rng, idx.size)
    return ObservationSeries(obs, states, seed)


def random_transition_matrix(rng: np.random.Generator, K: int, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(K, concentration), size=K)


def uniform_initial(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)

