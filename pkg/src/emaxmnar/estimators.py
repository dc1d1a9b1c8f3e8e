"""Scikit-learn style estimator wrapping the functional fitting API.

The feature matrix convention is: column 0 holds the dose, any further
columns are auxiliary covariates used by the missingness model. The target
is the binary outcome with NaN marking missing responses.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .em_engine import EmControls
from .emax_fit import NewtonControls
from .model_core import success_prob, trial_records_from_arrays
from .simulate import METHODS, fit_by_method

__all__ = ["EmaxDoseResponse", "check_trial_arrays"]


def check_trial_arrays(X, y):
    """Validate and coerce the (X, y) estimator inputs.

    X must be numeric with nonnegative finite doses in column 0 and finite
    covariates elsewhere; y entries must be 0, 1 or NaN. Returns float
    arrays (X as 2-d, y flattened).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"X must be a nonempty 2-d array, got shape {X.shape}")
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
    if not np.all(np.isfinite(X[:, 0])) or np.any(X[:, 0] < 0.0):
        raise ValueError("doses (column 0 of X) must be finite and nonnegative")
    if X.shape[1] > 1 and not np.all(np.isfinite(X[:, 1:])):
        raise ValueError("covariates must be finite")
    observed = y[~np.isnan(y)]
    if observed.size and not np.all(np.isin(observed, (0.0, 1.0))):
        raise ValueError("y entries must be 0, 1 or NaN (missing)")
    return X, y


class EmaxDoseResponse(BaseEstimator):
    """Binary Emax dose-response estimator tolerating missing outcomes.

    Parameters
    ----------
    method : {"FIL", "IL", "CC", "NRI"}, default="FIL"
        FIL fits the EM model with a Jeffreys penalty on both sub-models,
        IL the unpenalized EM model; CC drops missing outcomes and NRI
        imputes them as failures.
    firth : bool, default=False
        Apply the Jeffreys penalty inside the CC/NRI baselines (the EM
        methods fix penalization through the method tag).
    level : float, default=0.95
        Confidence level of the Wald intervals.
    max_em_iter, em_tol
        Outer EM controls (EM methods only).
    max_iter, tol, max_step_halvings, ridge
        Inner Newton controls.

    Attributes
    ----------
    theta_ : EmaxParams with e0_, emax_, ed50_ also exposed separately.
    alpha_ : missingness-model coefficients (None for CC/NRI).
    se_, ci_, vcov_ : inference on the (e0, emax, ed50) scale.
    log_ed50_, se_log_ed50_, ci_log_ed50_ : log-scale dose summary.
    report_, emfit_ : the full fit objects behind the attributes.
    converged_, n_iter_ : convergence flag and iteration count.
    """

    def __init__(
        self,
        method="FIL",
        firth=False,
        level=0.95,
        max_em_iter=500,
        em_tol=1e-6,
        max_iter=100,
        tol=1e-8,
        max_step_halvings=30,
        ridge=1e-8,
    ):
        self.method = method
        self.firth = firth
        self.level = level
        self.max_em_iter = max_em_iter
        self.em_tol = em_tol
        self.max_iter = max_iter
        self.tol = tol
        self.max_step_halvings = max_step_halvings
        self.ridge = ridge

    def fit(self, X, y):
        """Fit the configured method on doses/covariates X and outcomes y."""
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        X, y = check_trial_arrays(X, y)
        records = trial_records_from_arrays(
            X[:, 0], np.where(np.isnan(y), np.nan, y), covariates=X[:, 1:]
        )
        newton = NewtonControls(
            max_iter=self.max_iter,
            tol=self.tol,
            max_step_halvings=self.max_step_halvings,
            ridge=self.ridge,
        )
        em = EmControls(max_em_iter=self.max_em_iter, em_tol=self.em_tol, inner=newton)
        theta_rep, alpha_rep, emfit = fit_by_method(
            records,
            self.method,
            firth=self.firth,
            em_controls=em,
            newton_controls=newton,
            level=self.level,
        )
        self.report_ = theta_rep
        self.alpha_report_ = alpha_rep
        self.emfit_ = emfit
        self.theta_ = theta_rep.theta
        self.e0_ = theta_rep.theta.e0
        self.emax_ = theta_rep.theta.emax
        self.ed50_ = theta_rep.theta.ed50
        self.log_ed50_ = theta_rep.log_ed50
        self.se_log_ed50_ = theta_rep.se_log_ed50
        self.ci_log_ed50_ = theta_rep.ci_log_ed50
        self.alpha_ = alpha_rep.alpha if alpha_rep is not None else None
        self.vcov_ = theta_rep.vcov
        self.se_ = theta_rep.se
        self.ci_ = theta_rep.ci
        self.converged_ = bool(emfit.converged if emfit is not None else theta_rep.converged)
        self.n_iter_ = int(
            emfit.em_iterations if emfit is not None else theta_rep.iterations
        )
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def _doses_from(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            return X[:, 0]
        return X.ravel()

    def dose_response(self, doses):
        """Success probabilities of the fitted curve at the given doses."""
        check_is_fitted(self, "theta_")
        return np.asarray(success_prob(np.asarray(doses, dtype=float), self.theta_))

    def predict_proba(self, X):
        """Class probabilities [P(y=0), P(y=1)] from the dose column of X."""
        check_is_fitted(self, "theta_")
        p = np.atleast_1d(self.dose_response(self._doses_from(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        """Most likely outcome at each dose."""
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
