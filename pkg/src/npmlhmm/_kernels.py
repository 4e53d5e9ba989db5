"""Compiled inner loops: scaled forward/backward recursions and chain sampling."""
import numba
import numpy as np


@numba.njit(cache=True)
def sample_chain(init_cdf, gamma_cdf, u):
    n = u.shape[0]
    K = init_cdf.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdf = init_cdf
    for t in range(n):
        k = 0
        while k < K - 1 and u[t] >= cdf[k]:
            k += 1
        out[t] = k
        cdf = gamma_cdf[k]
    return out


@numba.njit(cache=True)
def forward(init, gamma, emis):
    """Normalised forward pass.

    ``emis`` holds emission densities already divided by their row maximum.
    Returns ``(alpha, log_scale, bad)`` where ``alpha[t]`` is the filtered
    state law, ``log_scale`` the summed log normalisers and ``bad`` the first
    index with zero predictive mass (``-1`` if none).
    """
    n, K = emis.shape
    alpha = np.empty((n, K))
    scales = np.empty(n)
    total = 0.0
    for t in range(n):
        c = 0.0
        for k in range(K):
            if t == 0:
                a = init[k]
            else:
                a = 0.0
                for j in range(K):
                    a += alpha[t - 1, j] * gamma[j, k]
            a *= emis[t, k]
            alpha[t, k] = a
            c += a
        if not c > 0.0:
            return alpha, scales, -np.inf, t
        for k in range(K):
            alpha[t, k] /= c
        scales[t] = c
        total += np.log(c)
    return alpha, scales, total, -1


@numba.njit(cache=True)
def backward(gamma, emis, scales):
    n, K = emis.shape
    beta = np.empty((n, K))
    for k in range(K):
        beta[n - 1, k] = 1.0
    for t in range(n - 2, -1, -1):
        for j in range(K):
            b = 0.0
            for k in range(K):
                b += gamma[j, k] * emis[t + 1, k] * beta[t + 1, k]
            beta[t, j] = b / scales[t + 1]
    return beta


@numba.njit(cache=True)
def smooth(alpha, beta, gamma, emis, scales):
    """Smoothed marginals and summed pairwise marginals."""
    n, K = emis.shape
    post = alpha * beta
    for t in range(n):
        s = 0.0
        for k in range(K):
            s += post[t, k]
        for k in range(K):
            post[t, k] /= s
    xi_sum = np.zeros((K, K))
    for t in range(n - 1):
        for j in range(K):
            aj = alpha[t, j] / scales[t + 1]
            for k in range(K):
                xi_sum[j, k] += aj * gamma[j, k] * emis[t + 1, k] * beta[t + 1, k]
    return post, xi_sum
