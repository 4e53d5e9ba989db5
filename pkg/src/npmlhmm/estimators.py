"""scikit-learn style wrappers around the HMM fitting routines."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import ObservationSeries
from .estimation import FitConfig, em_fit, npmle_fit
from .likelihood import forward_backward, log_likelihood


def _series(X) -> ObservationSeries:
    X = check_array(X, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"expected a single observation column, got {X.shape[1]}")
        X = X[:, 0]
    return ObservationSeries(X)


class _HmmEstimator(DensityMixin, BaseEstimator):
    def _config(self) -> FitConfig:
        return FitConfig(
            max_iter=self.max_iter,
            rel_tol=self.tol,
            restarts=self.n_init,
            seed=0 if self.random_state is None else int(self.random_state),
        )

    def _store(self, fit):
        self.fit_result_ = fit
        self.model_ = fit.model
        self.transmat_ = fit.model.gamma
        self.densities_ = fit.model.densities
        self.loglik_ = fit.loglik
        self.n_iter_ = fit.n_iter
        self.converged_ = fit.converged
        return self

    def score(self, X, y=None) -> float:
        """Log-likelihood of the series ``X``."""
        check_is_fitted(self, "model_")
        return log_likelihood(self.model_, _series(X))

    def predict_proba(self, X) -> np.ndarray:
        """Smoothed state probabilities, one row per time step."""
        check_is_fitted(self, "model_")
        return forward_backward(self.model_, _series(X)).gamma_t

    def predict(self, X) -> np.ndarray:
        """Most probable state at each time step (marginal, not a joint path)."""
        return self.predict_proba(X).argmax(axis=1)


class GaussianMixtureHMM(_HmmEstimator):
    """HMM whose states emit fixed-size Gaussian mixtures (``n_components=1``: Gaussian HMM)."""

    def __init__(self, n_states=3, n_components=1, max_iter=500, tol=1e-8, n_init=5, random_state=None):
        self.n_states = n_states
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        return self._store(em_fit(_series(X), self.n_states, self.n_components, self._config()))


class NonparametricHMM(_HmmEstimator):
    """HMM with state densities grown until the likelihood gain stalls."""

    def __init__(
        self,
        n_states=3,
        component_gain_tol=2.0,
        max_components=10,
        max_iter=500,
        tol=1e-8,
        n_init=5,
        random_state=None,
    ):
        self.n_states = n_states
        self.component_gain_tol = component_gain_tol
        self.max_components = max_components
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        config = self._config()
        config.component_gain_tol = self.component_gain_tol
        config.max_components = self.max_components
        fit = npmle_fit(_series(X), self.n_states, config)
        self.support_sizes_ = fit.support_sizes
        return self._store(fit)
