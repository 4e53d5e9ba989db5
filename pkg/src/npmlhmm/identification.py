"""Executable identification theory: Kruskal ranks, block conditional CDFs,
the three-way array of joint block probabilities and its blind recovery."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    RANK_RTOL,
    HmmModel,
    ValidationError,
    check_transition_matrix,
    is_ergodic,
    make_rng,
    stationary_distribution,
)
from .likelihood import GuardError

log = logging.getLogger(__name__)

BLOCK_SUM_LIMIT = 10**5
MAX_BLOCK_LENGTH = 6
GRID_SV_MIN = 1e-6
EIGEN_GAP_MIN = 1e-8


class GridSearchError(RuntimeError):
    """No full-rank evaluation grid in the candidate pool."""

    def __init__(self, message, best_singular_values):
        super().__init__(message)
        self.best_singular_values = best_singular_values


class RecoveryError(RuntimeError):
    """Blind tensor recovery could not separate the hidden states."""


# ---------------------------------------------------------------------------
# small linear-algebra helpers


def kruskal_rank(M, tol: float | None = None) -> int:
    """Largest ``j`` such that every set of ``j`` rows is linearly independent.

    ``tol`` defaults to ``RANK_RTOL`` times the largest singular value of ``M``.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    rows = M.shape[0]
    if M.size == 0:
        return 0
    if tol is None:
        smax = np.linalg.norm(M, 2)
        tol = RANK_RTOL * smax if smax > 0 else 0.0
    kr = 0
    for j in range(1, min(rows, M.shape[1]) + 1):
        for subset in itertools.combinations(range(rows), j):
            s = np.linalg.svd(M[list(subset)], compute_uv=False)
            if not s[-1] > tol:
                return kr
        kr = j
    return kr


def time_reversal(gamma) -> np.ndarray:
    """Reversed-time transition matrix ``pi_k alpha_{k,j} / pi_j``."""
    g = check_transition_matrix(gamma)
    pi = stationary_distribution(g)
    return (g.T * pi[None, :]) / pi[:, None]


def required_window(K: int) -> int:
    """Block length ``(2K+1)(K^2-2K+2)+1`` that identifies a general starting law."""
    if K < 1:
        raise ValidationError("K must be at least 1")
    return (2 * K + 1) * (K * K - 2 * K + 2) + 1


def primitivity_exponent_check(gamma) -> bool:
    """Whether ``gamma ** (K^2-2K+2)`` is entrywise positive, from the zero pattern alone."""
    g = check_transition_matrix(gamma)
    if not is_ergodic(g):
        raise ValidationError("primitivity check needs an ergodic transition matrix")
    K = g.shape[0]
    pattern = (g > 0).astype(np.int64)
    power = np.eye(K, dtype=np.int64)
    for _ in range(K * K - 2 * K + 2):
        power = ((power @ pattern) > 0).astype(np.int64)
    return bool(power.all())


def lumpability_check(gamma, partition) -> bool:
    """Kemeny-Snell criterion: block transition mass is constant within each block.

    ``partition`` is a list of collections of 0-based state indices.
    """
    g = check_transition_matrix(gamma)
    K = g.shape[0]
    blocks = [sorted(int(i) for i in b) for b in partition]
    flat = [i for b in blocks for i in b]
    if any(len(b) == 0 for b in blocks) or sorted(flat) != list(range(K)):
        raise ValidationError("partition must split 0..K-1 into disjoint non-empty blocks")
    mass = np.column_stack([g[:, b].sum(axis=1) for b in blocks])
    for b in blocks:
        if np.max(np.ptp(mass[b], axis=0)) > 1e-12:
            return False
    return True


# ---------------------------------------------------------------------------
# block conditional distribution functions


def cdf_matrix(model: HmmModel, points) -> np.ndarray:
    """``F_k(points)`` stacked over states; ``+inf`` maps to exactly 1."""
    pts = np.asarray(points, dtype=float)
    uniq, inv = np.unique(np.where(np.isfinite(pts), pts, 0.0), return_inverse=True)
    out = np.empty((model.K,) + pts.shape)
    for k, f in enumerate(model.densities):
        v = np.asarray(f.cdf(uniq), dtype=float)[inv].reshape(pts.shape)
        out[k] = np.where(pts == np.inf, 1.0, np.where(pts == -np.inf, 0.0, v))
    return out


def _check_guard(K: int, T: int):
    if T > MAX_BLOCK_LENGTH or K**T > BLOCK_SUM_LIMIT:
        raise GuardError(
            f"exact block summation refused: K={K}, T={T} (limits T <= {MAX_BLOCK_LENGTH}, "
            f"K**T <= {BLOCK_SUM_LIMIT})"
        )


def _block_products(trans: np.ndarray, F_blocks: np.ndarray) -> np.ndarray:
    """``e_k' P D(b_1) P D(b_2) ... P D(b_T) 1`` for a batch of blocks.

    ``F_blocks`` has shape ``(K, P, T)``; returns ``(K, P)``.
    """
    K, P, T = F_blocks.shape
    v = np.ones((K, P))
    for t in range(T - 1, -1, -1):
        v = trans @ (F_blocks[:, :, t] * v)
    return v


def _as_blocks(blocks, T: int | None = None) -> np.ndarray:
    b = np.asarray(blocks, dtype=float)
    if b.ndim == 1:
        b = b[None, :] if T is None or b.size == T else b[:, None]
    return b


def block_cdf_matrix(model: HmmModel, direction: str, blocks) -> np.ndarray:
    """``K x P`` matrix of forward ``G_T`` or backward ``H_T`` values at ``P`` blocks.

    Backward blocks are given in natural time order ``(y_1, ..., y_T)`` for
    ``(Y_1, ..., Y_T)`` preceding the conditioning state ``X_{T+1}``.
    """
    b = _as_blocks(blocks)
    P, T = b.shape
    _check_guard(model.K, T)
    F = cdf_matrix(model, b)  # K x P x T
    if direction == "forward":
        return _block_products(model.gamma, F)
    if direction == "backward":
        return _block_products(time_reversal(model.gamma), F[:, :, ::-1])
    raise ValidationError("direction must be 'forward' or 'backward'")


def conditional_block_cdf(model: HmmModel, direction: str, block, k: int) -> float:
    """``pr(W_T <= block | X_{T+1} = k)`` (forward) or ``pr(V_T <= block | X_{T+1} = k)`` (backward)."""
    block = np.atleast_1d(np.asarray(block, dtype=float))
    return float(block_cdf_matrix(model, direction, block[None, :])[k, 0])


def joint_block_cdf(model: HmmModel, points) -> float:
    """``pr(Y_1 <= y_1, ..., Y_L <= y_L)`` under the model's initial law."""
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    F = cdf_matrix(model, pts)  # K x L
    v = np.ones(model.K)
    for t in range(pts.size - 1, 0, -1):
        v = model.gamma @ (F[:, t] * v)
    return float(model.initial @ (F[:, 0] * v))


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class EvaluationGrid:
    """Points at which the three factor matrices are evaluated.

    ``block_left`` and ``block_right`` hold ``K`` blocks of length ``T`` each
    (the columns of ``A_2`` and ``A_1``); ``extra_left``/``extra_right`` are the
    additional free blocks, and ``singletons`` holds ``m + 1`` scalar points
    with the last one used for transition recovery.
    """

    block_left: np.ndarray
    block_right: np.ndarray
    singletons: np.ndarray
    extra_left: np.ndarray
    extra_right: np.ndarray
    T: int
    singular_values: tuple = ()

    def __post_init__(self):
        for name in ("block_left", "block_right"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if arr.shape[1] != self.T:
                raise ValidationError(f"{name} blocks must have length T={self.T}")
            object.__setattr__(self, name, arr)
        for name in ("extra_left", "extra_right"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if arr.size != self.T:
                raise ValidationError(f"{name} must have length T={self.T}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "singletons", np.atleast_1d(np.asarray(self.singletons, dtype=float)))
        if self.block_left.shape[0] != self.block_right.shape[0]:
            raise ValidationError("left and right block counts differ")
        K = self.block_left.shape[0]
        if self.singletons.size != K * (K - 1) // 2 + 1:
            raise ValidationError(f"need m+1 = {K * (K - 1) // 2 + 1} singleton points for K={K}")

    @property
    def K(self) -> int:
        return self.block_left.shape[0]

    @property
    def y(self) -> float:
        return float(self.singletons[-1])


def marginal_quantiles(model: HmmModel, probs) -> np.ndarray:
    """Quantiles of the stationary marginal law by bisection on its CDF."""
    pi = stationary_distribution(model.gamma)
    means = np.array([f.mean for f in model.densities])
    sds = np.array([f.sd for f in model.densities])
    lo = np.full(len(probs), (means - 12 * sds).min())
    hi = np.full(len(probs), (means + 12 * sds).max())
    p = np.asarray(probs, dtype=float)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        c = pi @ cdf_matrix(model, mid)
        lo = np.where(c < p, mid, lo)
        hi = np.where(c < p, hi, mid)
    return 0.5 * (lo + hi)


def default_pool(model: HmmModel, T: int, max_points: int = 4096) -> np.ndarray:
    """Lattice over the 0.1%-99.9% quantile box of the stationary marginal."""
    lo, hi = marginal_quantiles(model, [0.001, 0.999])
    per_axis = max(3, int(np.floor(max_points ** (1.0 / T))))
    axis = np.linspace(lo, hi, per_axis)
    return np.array(list(itertools.product(axis, repeat=T)))


def _greedy_columns(values: np.ndarray, K: int):
    """Pick ``K`` columns of ``values`` (``K x P``) greedily maximising the smallest singular value."""
    chosen = []
    best_sv = 0.0
    P = values.shape[1]
    for _ in range(K):
        trial = np.empty((P, values.shape[0], len(chosen) + 1))
        trial[:, :, :-1] = values[:, chosen].T[None].transpose(0, 2, 1)
        trial[:, :, -1] = values.T
        s = np.linalg.svd(trial, compute_uv=False)[:, -1]
        s[chosen] = -1.0
        best = int(np.argmax(s))  # first maximiser keeps the search deterministic
        chosen.append(best)
        best_sv = float(s[best])
    return chosen, best_sv


def find_full_rank_grid(model: HmmModel, T: int | None = None, candidate_pool=None) -> EvaluationGrid:
    """Greedy search for blocks making ``A_1`` and ``A_2`` well conditioned.

    ``T`` defaults to ``max(K - 1, 1)``. Singleton points separate every pair
    of state CDFs as far as the pool allows.
    """
    K = model.K
    T = max(K - 1, 1) if T is None else int(T)
    if T < K - 1:
        raise ValidationError(f"T={T} is below K-1={K - 1}")
    _check_guard(K, T)
    pool = default_pool(model, T) if candidate_pool is None else np.asarray(candidate_pool, dtype=float)
    pool = pool.reshape(pool.shape[0], -1) if pool.ndim > 1 else pool[:, None]
    if pool.shape[1] != T:
        raise ValidationError(f"candidate blocks must have length T={T}")
    G = block_cdf_matrix(model, "forward", pool)
    H = block_cdf_matrix(model, "backward", pool)
    right, sv1 = _greedy_columns(G, K)
    left, sv2 = _greedy_columns(H, K)
    if not (sv1 > GRID_SV_MIN and sv2 > GRID_SV_MIN):
        raise GridSearchError(
            f"no full-rank grid in the pool: best smallest singular values A_1={sv1:.3g}, A_2={sv2:.3g}",
            (sv1, sv2),
        )
    line = np.unique(pool.ravel())
    F = cdf_matrix(model, line)
    singles = []
    for i, j in itertools.combinations(range(K), 2):
        gap = np.abs(F[i] - F[j])
        if not gap.max() > GRID_SV_MIN:
            raise GridSearchError(
                f"states {i + 1} and {j + 1} have indistinguishable CDFs on the pool "
                f"(max separation {gap.max():.3g})",
                (sv1, sv2),
            )
        singles.append(line[int(np.argmax(gap))])
    # the recovery point: every F_k(y) comfortably away from 0
    singles.append(line[int(np.argmax(F.min(axis=0)))])
    centre = pool[int(np.argmin(np.abs(pool - np.median(pool, axis=0)).sum(axis=1)))]
    return EvaluationGrid(pool[left], pool[right], np.array(singles), centre, centre, T, (sv1, sv2))


# ---------------------------------------------------------------------------
# the three-way array


@dataclass
class ThreeWayArray:
    """Tensor ``M(i, j, r) = sum_k pi_k M1[k, i] M2[k, j] M3[k, r]`` plus layout.

    ``layout`` records which right-mode columns hold ``A_1`` and, when the
    array was built for transition recovery, the shifted blocks ``(y, z_t)``.
    """

    values: np.ndarray
    factors: tuple | None = None
    layout: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape


def _factor_matrices(model: HmmModel, grid: EvaluationGrid, extended: bool):
    K, T = model.K, grid.T
    if grid.K != K:
        raise ValidationError(f"grid built for K={grid.K}, model has K={K}")
    pi = stationary_distribution(model.gamma)
    ones = np.ones((K, 1))
    H = block_cdf_matrix(model, "backward", np.vstack([grid.block_left, grid.extra_left]))
    M1 = np.hstack([H, ones])
    M2 = np.hstack([cdf_matrix(model, grid.singletons), ones])
    if not extended:
        G = block_cdf_matrix(model, "forward", np.vstack([grid.block_right, grid.extra_right]))
        M3 = np.hstack([G, ones])
        layout = {"A1": list(range(K)), "extra": K, "ones": K + 1}
    else:
        # windows of length T+1: (z_t, +inf) reproduce A_1, (y, z_t) give Gamma D_y A_1
        pad = np.hstack([grid.block_right, np.full((K, 1), np.inf)])
        shift = np.hstack([np.full((K, 1), grid.y), grid.block_right])
        extra = np.append(grid.extra_right, np.inf)
        _check_guard(K, T + 1)
        G = block_cdf_matrix(model, "forward", np.vstack([pad, shift, extra]))
        M3 = np.hstack([G, ones])
        layout = {"A1": list(range(K)), "A": list(range(K, 2 * K)), "extra": 2 * K, "ones": 2 * K + 1}
    layout["F_y"] = M2.shape[1] - 2
    layout["T"] = T
    return pi[:, None] * M1, M2, M3, layout


def build_threeway(model: HmmModel, grid: EvaluationGrid, extended: bool = False) -> ThreeWayArray:
    """Joint block CDF array ``pr(V_T <= z~_i, Y_{T+1} <= y_j, W_T <= z_r)``.

    With ``extended=True`` the right mode uses windows of length ``T+1`` so the
    array also carries the matrix needed to read off the transition matrix.
    """
    M1t, M2, M3, layout = _factor_matrices(model, grid, extended)
    values = np.einsum("ki,kj,kr->ijr", M1t, M2, M3)
    return ThreeWayArray(values, (M1t, M2, M3), layout)


@dataclass
class KruskalReport:
    ranks: tuple
    K: int
    failing: list
    note: str = ""

    @property
    def total(self) -> int:
        return int(sum(self.ranks))

    @property
    def required(self) -> int:
        return 2 * self.K + 2

    @property
    def holds(self) -> bool:
        return self.total >= self.required

    def summary(self) -> str:
        s = (
            f"Kruskal ranks (M1~, M2, M3) = {self.ranks}, sum {self.total} "
            f"{'>=' if self.holds else '<'} 2K+2 = {self.required}"
        )
        if self.failing:
            s += f"; deficient: {', '.join(self.failing)}"
        return s + (f"; {self.note}" if self.note else "")


def verify_kruskal_condition(model: HmmModel, grid: EvaluationGrid) -> KruskalReport:
    M1t, M2, M3, _ = _factor_matrices(model, grid, extended=False)
    K = model.K
    ranks = (kruskal_rank(M1t), kruskal_rank(M2), kruskal_rank(M3))
    failing = []
    if ranks[0] < K:
        failing.append("M1~")
    if K >= 2 and ranks[1] < 2:
        failing.append("M2")
    if ranks[2] < K:
        failing.append("M3")
    note = "K=1: the condition 3 >= 4 can never hold, identification is trivial" if K == 1 else ""
    return KruskalReport(ranks, K, failing, note)


# ---------------------------------------------------------------------------
# recovery


def recover_transition_matrix(A, A1, F_at_y) -> np.ndarray:
    """``Gamma = A A_1^{-1} diag(1 / F(y))``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    A1 = np.atleast_2d(np.asarray(A1, dtype=float))
    Fy = np.atleast_1d(np.asarray(F_at_y, dtype=float))
    K = A1.shape[0]
    if K == 1:
        return np.ones((1, 1))
    s = np.linalg.svd(A1, compute_uv=False)
    if not s[-1] > RANK_RTOL * s[0]:
        raise ValidationError(f"A_1 is singular (smallest singular value {s[-1]:.3g})")
    zero = np.flatnonzero(Fy == 0)
    if zero.size:
        raise ValidationError(f"F_k(y) = 0 for state k={int(zero[0]) + 1}")
    return np.linalg.solve(A1.T, A.T).T / Fy[None, :]


@dataclass
class SpectralResult:
    gamma: np.ndarray | None
    F_values: np.ndarray
    pi: np.ndarray
    G_values: np.ndarray
    H_values: np.ndarray
    permutation_ambiguous: bool = True
    attempts: int = 1


def _orthobasis(unfolding: np.ndarray, K: int, what: str) -> np.ndarray:
    U, s, _ = np.linalg.svd(unfolding, full_matrices=False)
    if s.size < K or not s[K - 1] > RANK_RTOL * s[0]:
        got = s[K - 1] if s.size >= K else 0.0
        raise RecoveryError(f"{what} unfolding has numerical rank below K={K} (singular value {got:.3g})")
    return U[:, :K]


def spectral_recover(array: ThreeWayArray, K: int, seed: int = 0, max_attempts: int = 5) -> SpectralResult:
    """Blind recovery of the factors from the tensor alone.

    Projected slice pencils are diagonalised to find the right-mode factor,
    scaled through its all-ones column; the remaining factors follow from a
    least-squares contraction. State order is arbitrary.
    """
    X = np.asarray(array.values, dtype=float)
    I, J, R = X.shape
    layout = array.layout or {"A1": list(range(K)), "ones": R - 1, "F_y": J - 2}
    P1 = _orthobasis(X.reshape(I, J * R), K, "first-mode")
    P3 = _orthobasis(np.moveaxis(X, 2, 0).reshape(R, I * J), K, "third-mode")
    core = np.einsum("ia,ijr,rb->jab", P1, X, P3)
    rng = make_rng(seed, 0x5EC7)
    last_err = None
    for attempt in range(1, max_attempts + 1):
        w = rng.standard_normal((2, J))
        S1 = np.tensordot(w[0], core, axes=1)
        S2 = np.tensordot(w[1], core, axes=1)
        try:
            pencil = np.linalg.solve(S1, S2).T
        except np.linalg.LinAlgError as exc:
            last_err = RecoveryError(f"singular slice combination: {exc}")
            continue
        vals, vecs = np.linalg.eig(pencil)
        if np.max(np.abs(vals.imag)) > 1e-8 * max(1.0, np.max(np.abs(vals))):
            last_err = RecoveryError("complex pencil eigenvalues; the factors are not separated")
            continue
        vals = vals.real
        gaps = np.abs(vals[:, None] - vals[None, :])
        np.fill_diagonal(gaps, np.inf)
        if K > 1 and gaps.min() < EIGEN_GAP_MIN * max(1.0, np.max(np.abs(vals))):
            last_err = RecoveryError(
                f"eigen-gap {gaps.min():.3g} below {EIGEN_GAP_MIN}; try different slice weights"
            )
            continue
        C = P3 @ vecs.real  # R x K, columns proportional to the state rows of M3
        scale = C[layout["ones"]]
        if np.min(np.abs(scale)) < 1e-12:
            last_err = RecoveryError("degenerate scaling column")
            continue
        M3 = (C / scale).T  # K x R
        rest = np.linalg.lstsq(M3.T, np.moveaxis(X, 2, 0).reshape(R, I * J), rcond=None)[0]
        rest = rest.reshape(K, I, J)
        pi = rest[:, -1, -1]
        M2 = rest[:, -1, :] / pi[:, None]
        M1 = rest[:, :, -1] / pi[:, None]
        gamma = None
        if "A" in layout:
            gamma = recover_transition_matrix(M3[:, layout["A"]], M3[:, layout["A1"]], M2[:, layout["F_y"]])
        return SpectralResult(gamma, M2[:, :-1], pi, M3[:, :-1], M1[:, :-1], True, attempt)
    raise last_err


def match_states(estimated, truth) -> np.ndarray:
    """Permutation ``p`` minimising ``sum |estimated[p[k]] - truth[k]|`` (rows are states)."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    K = tru.shape[0]
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(K)):
        cost = np.abs(est[list(perm)] - tru).sum()
        if cost < best_cost:
            best, best_cost = np.array(perm), cost
    return best


def recovery_error(model: HmmModel, result: SpectralResult, grid: EvaluationGrid) -> tuple:
    """Max-abs errors ``(Gamma, F-values)`` after the best state matching."""
    F_true = cdf_matrix(model, grid.singletons)
    perm = match_states(result.F_values, F_true)
    f_err = float(np.max(np.abs(result.F_values[perm] - F_true)))
    g_err = np.nan
    if result.gamma is not None:
        g_err = float(np.max(np.abs(result.gamma[np.ix_(perm, perm)] - model.gamma)))
    return g_err, f_err


# ---------------------------------------------------------------------------
# counterexamples


def counterexample_gamma(base_gamma, delta: float, beta: float) -> np.ndarray:
    """``(K+1)``-state rank-``K`` matrix splitting the last state with ``p = beta/(1+beta-delta)``."""
    g = check_transition_matrix(base_gamma)
    if not (0 < delta < 1 and 0 < beta < 1):
        raise ValidationError("delta and beta must lie in (0, 1)")
    if delta == beta:
        raise ValidationError("delta == beta makes the two parameterizations coincide")
    p = beta / (1 + beta - delta)
    K = g.shape[0]
    g1 = np.zeros((K + 1, K + 1))
    g1[:K, : K - 1] = g[:, : K - 1]
    g1[:K, K - 1] = p * g[:, K - 1]
    g1[:K, K] = (1 - p) * g[:, K - 1]
    g1[K] = g1[K - 1]
    return g1


def rank_deficient_counterexample(base_gamma, delta: float, beta: float, base_densities):
    """Two distinct stationary ``(K+1)``-state models with identical observation laws."""
    g = check_transition_matrix(base_gamma)
    K = g.shape[0]
    if len(base_densities) != K + 1:
        raise ValidationError(f"need K+1 = {K + 1} base densities")
    if not is_ergodic(g) or np.linalg.matrix_rank(g) < K:
        raise ValidationError("base matrix must be ergodic and of full rank")
    g1 = counterexample_gamma(g, delta, beta)
    dens = list(base_densities)
    fK, fK1 = dens[K - 1], dens[K]
    tilde = dens[: K - 1] + [fK.mix(fK1, delta), fK.mix(fK1, beta)]
    return HmmModel.stationary_model(g1, dens), HmmModel.stationary_model(g1, tilde)
