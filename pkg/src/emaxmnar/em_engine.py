"""EM loop for jointly fitting the Emax dose-response model and the
missingness logistic model when binary outcomes are nonignorably missing.

Missing outcomes enter as two weighted pseudo-observations whose weights are
the posterior probabilities of each outcome value given the observed data;
the two sub-models are maximized separately in each M-step. ``method="IL"``
is the plain weighted-EM likelihood fit, ``method="FIL"`` adds a Jeffreys
(log-determinant) penalty to each sub-model objective (once per objective,
not once per row).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._numerics import invert_psd, wald_interval
from .emax_fit import (
    NewtonControls,
    _newton_emax_core,
    _penalty_hessian_theta,
    build_theta_report,
    default_theta_init,
    emax_hessian,
    jeffreys_penalty_theta,
    theta_vcov as _complete_theta_vcov,
)
from .exceptions import DoseLevelsError, SingularInformationError
from .missing_fit import (
    _newton_alpha_core,
    _penalty_hessian_alpha,
    alpha_info,
    alpha_vcov as _complete_alpha_vcov,
    build_alpha_report,
    jeffreys_penalty_alpha,
)
from .model_core import (
    AlphaParams,
    EmaxParams,
    FitReport,
    PseudoData,
    alpha_loglik,
    emax_loglik,
    expit,
    grad_eta,
)

__all__ = [
    "EmControls",
    "EmFit",
    "expand_dataset",
    "e_step_weights",
    "observed_data_loglik",
    "em_fit",
    "louis_information",
    "wald_ci",
]


@dataclass(frozen=True)
class EmControls:
    """Outer EM controls; ``em_tol`` bounds the max absolute change in the
    stacked (theta, alpha) parameters between iterations."""

    max_em_iter: int = 500
    em_tol: float = 1e-6
    inner: NewtonControls = field(default_factory=NewtonControls)

    def __post_init__(self):
        if self.max_em_iter < 1:
            raise ValueError(f"max_em_iter must be >= 1, got {self.max_em_iter}")
        if self.em_tol <= 0.0:
            raise ValueError(f"em_tol must be positive, got {self.em_tol}")


@dataclass(frozen=True, eq=False)
class EmFit:
    """Result of one EM run: per-sub-model reports, the joint covariance
    over (theta, alpha), the pseudo-data with converged weights, and the
    trace of the observed-data (penalized when FIL) log-likelihood."""

    method: str
    theta_report: FitReport
    alpha_report: FitReport
    vcov: np.ndarray | None
    weights: PseudoData
    em_iterations: int
    converged: bool
    objective_trace: np.ndarray
    louis_psd: bool
    notes: tuple = ()


def expand_dataset(data):
    """Expand trial records into weighted pseudo-observations.

    Observed outcomes give one row with weight 1; missing outcomes give two
    consecutive rows (outcome filled 0 then 1) with initial weights 1/2.
    """
    if isinstance(data, PseudoData):
        return data
    records = list(data)
    if not records:
        return PseudoData(
            subject=np.empty(0, dtype=int),
            dose=np.empty(0),
            yfill=np.empty(0),
            r=np.empty(0),
            weight=np.empty(0),
            z=np.empty((0, 3)),
            records=records,
        )
    p = len(records[0].covariates)
    if any(len(rec.covariates) != p for rec in records):
        raise ValueError("all records must share one covariate length")
    rows = sum(2 if rec.missing else 1 for rec in records)
    subject = np.empty(rows, dtype=int)
    dose = np.empty(rows)
    yfill = np.empty(rows)
    r = np.empty(rows)
    weight = np.empty(rows)
    z = np.empty((rows, p + 3))
    at = 0
    for i, rec in enumerate(records):
        copies = 2 if rec.missing else 1
        for c in range(copies):
            subject[at] = i
            dose[at] = rec.dose
            yfill[at] = float(c) if rec.missing else float(rec.outcome)
            r[at] = 1.0 if rec.missing else 0.0
            weight[at] = 0.5 if rec.missing else 1.0
            z[at, 0] = 1.0
            z[at, 1 : p + 1] = rec.covariates
            z[at, p + 1] = rec.dose
            z[at, p + 2] = yfill[at]
            at += 1
    return PseudoData(
        subject=subject, dose=dose, yfill=yfill, r=r, weight=weight, z=z, records=records
    )


def _reweight_arrays(pseudo, x_theta, x_alpha):
    # posterior weights for the missing pairs; observed rows keep weight 1
    if pseudo.n_missing == 0:
        return pseudo
    i0 = pseudo.pair_rows
    i1 = i0 + 1
    d = pseudo.dose[i0]
    pi = expit(x_theta[0] + x_theta[1] * d / (x_theta[2] + d))
    num0 = (1.0 - pi) * expit(pseudo.z[i0] @ x_alpha)
    num1 = pi * expit(pseudo.z[i1] @ x_alpha)
    w0 = num0 / (num0 + num1)
    weight = pseudo.weight.copy()
    weight[i0] = w0
    weight[i1] = 1.0 - w0
    return pseudo.with_weights(weight)


def e_step_weights(data, theta, alpha):
    """Expand (if needed) and reweight a dataset at the given parameters.

    For a missing outcome the weight of the row filled with y is
    ``f(y | theta) f(r=1 | z(y), alpha)`` normalized over y in {0, 1}; the
    pair sums to 1 exactly. Observed rows keep weight 1.
    """
    a = alpha.as_array() if isinstance(alpha, AlphaParams) else np.asarray(alpha, dtype=float)
    return _reweight_arrays(expand_dataset(data), theta.as_array(), a)


def _observed_loglik_arrays(pseudo, x_theta, x_alpha, penalized):
    lin = x_theta[0] + x_theta[1] * pseudo.dose / (x_theta[2] + pseudo.dose)
    u = pseudo.z @ x_alpha
    obs = pseudo.r == 0.0
    # observed subjects contribute log f(y) + log(1 - p)
    total = float(
        np.sum(pseudo.yfill[obs] * lin[obs] - np.logaddexp(0.0, lin[obs]))
        - np.sum(np.logaddexp(0.0, u[obs]))
    )
    if pseudo.n_missing:
        i0 = pseudo.pair_rows
        i1 = i0 + 1
        pi = expit(lin[i0])
        num0 = (1.0 - pi) * expit(u[i0])
        num1 = pi * expit(u[i1])
        total += float(np.sum(np.log(num0 + num1)))
    if penalized:
        theta = EmaxParams.from_array(x_theta)
        try:
            weighted = _reweight_arrays(pseudo, x_theta, x_alpha)
            total += jeffreys_penalty_theta(weighted, theta)
            total += jeffreys_penalty_alpha(weighted, x_alpha)
        except SingularInformationError:
            # fall back to the penalties under the weights as passed; only
            # contrived reweightings differ enough to flip singularity
            total += jeffreys_penalty_theta(pseudo, theta)
            total += jeffreys_penalty_alpha(pseudo, x_alpha)
    return total


def observed_data_loglik(data, theta, alpha, penalized=False):
    """Log-likelihood of the observed data, marginalizing missing outcomes.

    With ``penalized=True`` both Jeffreys penalties are added, evaluated at
    the weights this (theta, alpha) induces.
    """
    pseudo = expand_dataset(data)
    a = alpha.as_array() if isinstance(alpha, AlphaParams) else np.asarray(alpha, dtype=float)
    return _observed_loglik_arrays(pseudo, theta.as_array(), a, penalized)


def _per_row_scores(pseudo, theta, x_alpha):
    q = pseudo.z.shape[1]
    lin = theta.e0 + theta.emax * pseudo.dose / (theta.ed50 + pseudo.dose)
    pi = expit(lin)
    p = expit(pseudo.z @ x_alpha)
    scores = np.empty((len(pseudo), 3 + q))
    scores[:, :3] = grad_eta(pseudo.dose, theta) * (pseudo.yfill - pi)[:, None]
    scores[:, 3:] = pseudo.z * (pseudo.r - p)[:, None]
    return scores


def _louis(pseudo, theta, alpha, firth):
    x_alpha = alpha.as_array()
    q = x_alpha.shape[0]
    k = 3 + q
    h_theta = emax_hessian(pseudo, theta)
    h_alpha = -alpha_info(pseudo, x_alpha)
    if firth:
        # penalized Hessian; the per-subject scores below stay unpenalized
        # because the penalty does not depend on the missing outcomes
        h_theta = h_theta + _penalty_hessian_theta(pseudo, theta)
        h_alpha = h_alpha + _penalty_hessian_alpha(pseudo, x_alpha)
    info = np.zeros((k, k))
    info[:3, :3] = -h_theta
    info[3:, 3:] = -h_alpha
    if pseudo.n_missing:
        # observed subjects cancel exactly between the score-product and
        # mean-score terms, so only the missing pairs contribute
        scores = _per_row_scores(pseudo, theta, x_alpha)
        i0 = pseudo.pair_rows
        i1 = i0 + 1
        s0 = scores[i0]
        s1 = scores[i1]
        w0 = pseudo.weight[i0]
        w1 = pseudo.weight[i1]
        info -= s0.T @ (w0[:, None] * s0) + s1.T @ (w1[:, None] * s1)
        qdot = w0[:, None] * s0 + w1[:, None] * s1
        info += qdot.T @ qdot
    return info


def louis_information(data, emfit):
    """Observed information over the stacked (theta, alpha) parameters at the
    EM solution, assembled from complete-data byproducts.

    Equals the complete-data information minus the conditional variance of
    the per-subject scores; with no missing data it reduces to the negated
    (penalized when FIL) complete-data Hessian exactly. The converged
    weights stored on ``emfit`` already expand ``data``, so the records are
    only accepted for interface symmetry.
    """
    pseudo = emfit.weights if emfit.weights is not None else e_step_weights(
        data, emfit.theta_report.theta, emfit.alpha_report.alpha
    )
    return _louis(
        pseudo,
        emfit.theta_report.theta,
        emfit.alpha_report.alpha,
        emfit.method == "FIL",
    )


def wald_ci(estimate, se, level=0.95):
    """Normal-approximation interval ``estimate +- z_{alpha/2} se``."""
    if se < 0.0:
        raise ValueError(f"se must be nonnegative, got {se}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return wald_interval(float(estimate), float(se), float(level))


def em_fit(
    data,
    method="IL",
    controls=None,
    level=0.95,
    theta_init=None,
    alpha_init=None,
    compute_vcov=True,
    track_objective=True,
):
    """Alternate posterior reweighting with the two sub-model Newton fits.

    Each M-step warm-starts from the current iterate, so accepted steps
    never lower the expected (penalized) complete-data objective and the
    observed-data objective is nondecreasing across iterations. Stops when
    the max absolute change in (theta, alpha) drops below ``em_tol``.

    Inner nonconvergence is recorded in ``notes`` and the loop continues
    with the best iterate; only the outer loop failing to settle within
    ``max_em_iter`` marks the result nonconverged. The joint covariance is
    the inverse observed information assembled from complete-data
    byproducts (penalized Hessian but unpenalized per-subject scores when
    ``method="FIL"``).

    Parameters
    ----------
    data
        Iterable of TrialRecord, or an already expanded PseudoData.
    method
        "IL" for the weighted-EM likelihood fit, "FIL" to add the Jeffreys
        penalty to both sub-model objectives.
    compute_vcov
        Skip the joint information matrix when False (cheap complete-data
        covariances are still attached to the sub-reports).
    track_objective
        Record the observed-data objective at every iteration; when False
        only the initial and final values are kept (cheaper for FIL, whose
        penalized objective costs two log-determinants per evaluation).
    """
    if method not in ("IL", "FIL"):
        raise ValueError(f"method must be 'IL' or 'FIL', got {method!r}")
    firth = method == "FIL"
    controls = controls or EmControls()
    pseudo = expand_dataset(data)
    n_levels = np.unique(pseudo.dose).size
    if n_levels < 2:
        raise DoseLevelsError(
            f"EM fit needs at least 2 distinct dose levels, got {n_levels}"
        )
    x_theta = (theta_init or default_theta_init(pseudo)).as_array()
    if alpha_init is None:
        x_alpha = np.zeros(pseudo.z.shape[1])
    else:
        x_alpha = (
            alpha_init.as_array()
            if isinstance(alpha_init, AlphaParams)
            else np.asarray(alpha_init, dtype=float).copy()
        )
    trace = [_observed_loglik_arrays(pseudo, x_theta, x_alpha, firth)]
    notes = []
    inner_flags = {"emax": True, "missingness": True}
    converged = False
    iterations = 0
    delta = np.inf
    for iterations in range(1, controls.max_em_iter + 1):
        pseudo = _reweight_arrays(pseudo, x_theta, x_alpha)
        # mid-stream M-steps only need to out-resolve the current EM change;
        # the tolerance tightens to the configured one as the loop settles
        inner_tol = max(controls.inner.tol, min(1e-3, 0.05 * delta))
        inner = (
            controls.inner
            if inner_tol == controls.inner.tol
            else replace(controls.inner, tol=inner_tol)
        )
        new_theta, _, _, theta_ok, theta_notes = _newton_emax_core(
            pseudo, firth, x_theta, inner
        )
        new_alpha, _, _, alpha_ok, alpha_notes = _newton_alpha_core(
            pseudo, firth, x_alpha, inner
        )
        inner_flags["emax"] = theta_ok
        inner_flags["missingness"] = alpha_ok
        for ok, label, sub_notes in (
            (theta_ok, "emax", theta_notes),
            (alpha_ok, "missingness", alpha_notes),
        ):
            if not ok and not any(n.startswith(f"{label} M-step") for n in notes):
                notes.append(
                    f"{label} M-step did not converge (first at EM iteration {iterations})"
                )
            for sub in sub_notes:
                tagged = f"{label}: {sub}"
                if tagged not in notes:
                    notes.append(tagged)
        delta = max(
            float(np.max(np.abs(new_theta - x_theta))),
            float(np.max(np.abs(new_alpha - x_alpha))),
        )
        x_theta = new_theta
        x_alpha = new_alpha
        if track_objective:
            trace.append(_observed_loglik_arrays(pseudo, x_theta, x_alpha, firth))
        if delta < controls.em_tol:
            converged = True
            break

    # finalization cycle at the configured inner tolerance: the adaptive
    # M-steps only out-resolve the EM increments, so polish once at full
    # precision (this is one more E+M pass and preserves the fixed point)
    pseudo = _reweight_arrays(pseudo, x_theta, x_alpha)
    x_theta, _, _, theta_ok, theta_notes = _newton_emax_core(
        pseudo, firth, x_theta, controls.inner, polish=True
    )
    x_alpha, _, _, alpha_ok, alpha_notes = _newton_alpha_core(
        pseudo, firth, x_alpha, controls.inner, polish=True
    )
    inner_flags["emax"] = theta_ok
    inner_flags["missingness"] = alpha_ok
    for ok, label, sub_notes in (
        (theta_ok, "emax", theta_notes),
        (alpha_ok, "missingness", alpha_notes),
    ):
        if not ok and not any(n.startswith(f"{label} M-step") for n in notes):
            notes.append(f"{label} M-step did not converge (at finalization)")
        for sub in sub_notes:
            tagged = f"{label}: {sub}"
            if tagged not in notes:
                notes.append(tagged)
    trace.append(_observed_loglik_arrays(pseudo, x_theta, x_alpha, firth))
    theta = EmaxParams.from_array(x_theta)
    alpha = AlphaParams.from_array(x_alpha)
    final = _reweight_arrays(pseudo, x_theta, x_alpha)
    louis_psd = True
    vcov_joint = None
    if compute_vcov:
        info = _louis(final, theta, alpha, firth)
        eigs = np.linalg.eigvalsh(info)
        scale = max(1.0, float(np.max(np.abs(eigs))))
        if eigs[0] < -1e-8 * scale:
            louis_psd = False
            notes.append("observed information is not positive semidefinite")
        vcov_joint, note = invert_psd(info, "the joint observed information")
        if note:
            notes.append(note)
        theta_vc = vcov_joint[:3, :3]
        alpha_vc = vcov_joint[3:, 3:]
    else:
        # cheap complete-data covariances (no penalty curvature, no
        # missing-information correction); fine for point-estimate callers
        theta_vc, _ = _complete_theta_vcov(final, theta, False)
        alpha_vc, _ = _complete_alpha_vcov(final, alpha, False)

    theta_obj = emax_loglik(final, theta)
    alpha_obj = alpha_loglik(final, alpha)
    if firth:
        theta_obj += jeffreys_penalty_theta(final, theta)
        alpha_obj += jeffreys_penalty_alpha(final, alpha)
    theta_report = build_theta_report(
        method=method,
        theta=theta,
        vcov=theta_vc,
        iterations=iterations,
        converged=converged and inner_flags["emax"],
        objective=theta_obj,
        level=level,
        notes=notes,
    )
    alpha_report = build_alpha_report(
        method=method,
        alpha=alpha,
        vcov=alpha_vc,
        iterations=iterations,
        converged=converged and inner_flags["missingness"],
        objective=alpha_obj,
        level=level,
        notes=notes,
    )
    return EmFit(
        method=method,
        theta_report=theta_report,
        alpha_report=alpha_report,
        vcov=vcov_joint,
        weights=final,
        em_iterations=iterations,
        converged=converged,
        objective_trace=np.asarray(trace),
        louis_psd=louis_psd,
        notes=tuple(notes),
    )
