"""Weighted logistic regression of the missingness indicator on
(1, covariates..., dose, filled outcome), with optional Firth correction."""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from ._numerics import fast_solve, invert_psd, wald_interval
from .emax_fit import (
    NewtonControls,
    _ASCENT_SLACK,
    _LOGDET_FLOOR,
    _SCORING_ITER_LIMIT,
    _cap_step,
)
from .exceptions import DimensionMismatchError, SingularInformationError
from .model_core import AlphaParams, FitReport, _as_pseudo

__all__ = [
    "alpha_score",
    "alpha_info",
    "hat_diagonals",
    "jeffreys_penalty_alpha",
    "firth_score_alpha",
    "fit_missingness",
]

_SINGULAR_MESSAGE = (
    "information matrix of the missingness model is singular; "
    "the design is rank deficient for these weights"
)


def _coef_array(pseudo, alpha):
    a = alpha.as_array() if isinstance(alpha, AlphaParams) else np.asarray(alpha, dtype=float)
    if pseudo.z.shape[1] != a.shape[0]:
        raise DimensionMismatchError(
            f"design has {pseudo.z.shape[1]} columns but alpha has {a.shape[0]} entries"
        )
    return a


def alpha_score(pseudo, alpha):
    """Score of the weighted log-likelihood: Z^T (w (r - p))."""
    pseudo = _as_pseudo(pseudo)
    a = _coef_array(pseudo, alpha)
    p = special.expit(pseudo.z @ a)
    return pseudo.z.T @ (pseudo.weight * (pseudo.r - p))


def alpha_info(pseudo, alpha):
    """Information matrix Z^T V Z with V = diag(w p (1 - p))."""
    pseudo = _as_pseudo(pseudo)
    a = _coef_array(pseudo, alpha)
    p = special.expit(pseudo.z @ a)
    v = pseudo.weight * p * (1.0 - p)
    return (pseudo.z * v[:, None]).T @ pseudo.z


def _info_checked(pseudo, alpha):
    info = alpha_info(pseudo, alpha)
    sign, logdet = np.linalg.slogdet(info)
    if sign <= 0 or logdet < _LOGDET_FLOOR:
        raise SingularInformationError(_SINGULAR_MESSAGE)
    return info, logdet


def hat_diagonals(pseudo, alpha):
    """Leverages: diagonal of V^(1/2) Z (Z^T V Z)^-1 Z^T V^(1/2)."""
    pseudo = _as_pseudo(pseudo)
    a = _coef_array(pseudo, alpha)
    info, _ = _info_checked(pseudo, alpha)
    inv = np.linalg.inv(info)
    p = special.expit(pseudo.z @ a)
    v = pseudo.weight * p * (1.0 - p)
    return v * np.einsum("ij,ij->i", pseudo.z @ inv, pseudo.z)


def jeffreys_penalty_alpha(pseudo, alpha):
    """Half log-determinant of the information matrix."""
    pseudo = _as_pseudo(pseudo)
    _, logdet = _info_checked(pseudo, alpha)
    return 0.5 * logdet


def _jeffreys_grad_alpha(pseudo, alpha):
    a = _coef_array(pseudo, alpha)
    h = hat_diagonals(pseudo, alpha)
    p = special.expit(pseudo.z @ a)
    return pseudo.z.T @ (h * (0.5 - p))


def firth_score_alpha(pseudo, alpha):
    """Gradient of the penalized objective ``loglik + 0.5 log det info``.

    Componentwise ``sum_rows z [w (r - p) + h (1/2 - p)]``; the leverage h
    already carries the row weight through V, so this is the exact gradient.
    """
    pseudo = _as_pseudo(pseudo)
    a = _coef_array(pseudo, alpha)
    h = hat_diagonals(pseudo, alpha)
    p = special.expit(pseudo.z @ a)
    return pseudo.z.T @ (pseudo.weight * (pseudo.r - p) + h * (0.5 - p))


def _penalty_hessian_alpha(pseudo, alpha):
    a = _coef_array(pseudo, alpha)
    q = a.shape[0]
    out = np.empty((q, q))
    for k in range(q):
        h = 1e-5 * max(1.0, abs(a[k]))
        ap = a.copy()
        am = a.copy()
        ap[k] += h
        am[k] -= h
        gp = _jeffreys_grad_alpha(pseudo, ap)
        gm = _jeffreys_grad_alpha(pseudo, am)
        out[:, k] = (gp - gm) / (2.0 * h)
    return 0.5 * (out + out.T)


def _newton_alpha_core(pseudo, firth, a0, controls, polish=False):
    """Array-level Newton loop; returns (a, objective, iterations,
    converged, notes). Hot path shared by fit_missingness and the EM
    M-step.

    With ``polish`` a penalized fit that settles under Fisher scoring takes
    extra true-Hessian steps until the parameter change passes the tolerance
    again, which drives the penalized score to machine level.
    """
    Z = pseudo.z
    r = pseudo.r
    w = pseudo.weight
    x = np.asarray(a0, dtype=float).copy()

    def evaluate(ac):
        u = Z @ ac
        p = special.expit(u)
        ll = float(np.sum(w * (r * u - np.logaddexp(0.0, u))))
        if not firth:
            return ll, (p, None, None)
        v = w * p * (1.0 - p)
        info = (Z * v[:, None]).T @ Z
        sign, logdet = np.linalg.slogdet(info)
        if sign <= 0 or logdet < _LOGDET_FLOOR:
            return -math.inf, None
        return ll + 0.5 * logdet, (p, v, info)

    def penalty_grad_at(ac):
        p_c = special.expit(Z @ ac)
        v_c = w * p_c * (1.0 - p_c)
        info_c = (Z * v_c[:, None]).T @ Z
        inv_c = np.linalg.inv(info_c)
        lev = v_c * np.einsum("ij,ij->i", Z @ inv_c, Z)
        return Z.T @ (lev * (0.5 - p_c))

    def penalty_hessian(ac):
        q = ac.shape[0]
        out = np.empty((q, q))
        for k in range(q):
            h = 1e-5 * max(1.0, abs(ac[k]))
            ap = ac.copy()
            am = ac.copy()
            ap[k] += h
            am[k] -= h
            out[:, k] = (penalty_grad_at(ap) - penalty_grad_at(am)) / (2.0 * h)
        return 0.5 * (out + out.T)

    f, state = evaluate(x)
    if state is None:
        raise SingularInformationError(_SINGULAR_MESSAGE)
    notes = []
    converged = False
    iterations = 0
    newton_mode = False

    def attempt(step):
        for _ in range(controls.max_step_halvings + 1):
            cand = x + step
            fc, state_c = evaluate(cand)
            if math.isfinite(fc) and fc >= f - _ASCENT_SLACK:
                return cand, fc, state_c
            step = 0.5 * step
        return None, None, None

    for iterations in range(1, controls.max_iter + 1):
        p, v, info = state
        if v is None:
            v = w * p * (1.0 - p)
            info = (Z * v[:, None]).T @ Z
        if firth:
            inv = np.linalg.inv(info)
            leverage = v * np.einsum("ij,ij->i", Z @ inv, Z)
            score = Z.T @ (w * (r - p) + leverage * (0.5 - p))
        else:
            score = Z.T @ (w * (r - p))
        if firth and (newton_mode or iterations > _SCORING_ITER_LIMIT):
            # scoring ignores the penalty curvature and can cycle when the
            # penalty dominates; switch to true Newton steps
            try:
                system = info - penalty_hessian(x)
            except np.linalg.LinAlgError:
                system = info
        else:
            system = info
        step, note = fast_solve(system, score, controls.ridge)
        if note and note not in notes:
            notes.append(note)
        cand, fc, state_c = attempt(_cap_step(step, x))
        if cand is None and system is not info:
            step, note = fast_solve(info, score, controls.ridge)
            if note and note not in notes:
                notes.append(note)
            cand, fc, state_c = attempt(_cap_step(step, x))
        if cand is None:
            notes.append("step halving exhausted without improving the objective")
            break
        delta = float(np.max(np.abs(cand - x) / np.maximum(1.0, np.abs(cand))))
        x = cand
        f = fc
        state = state_c
        if delta < controls.tol:
            if newton_mode or not (firth and polish):
                converged = True
                break
            newton_mode = True
    return x, f, iterations, converged, notes


def build_alpha_report(
    method, alpha, vcov, iterations, converged, objective, level, notes=()
):
    """Assemble a missingness-model FitReport from a covariance matrix."""
    notes = list(notes)
    diag = np.diag(vcov)
    if np.any(diag < 0.0):
        notes.append("negative variance clipped to zero")
    se = np.sqrt(np.clip(diag, 0.0, None))
    ci = np.array(
        [wald_interval(est, float(s), level) for est, s in zip(alpha.coefficients, se)]
    )
    return FitReport(
        method=method,
        theta=None,
        alpha=alpha,
        vcov=vcov,
        se=se,
        ci=ci,
        log_ed50=None,
        se_log_ed50=None,
        ci_log_ed50=None,
        iterations=iterations,
        converged=converged,
        objective=objective,
        level=level,
        notes=tuple(notes),
    )


def alpha_vcov(pseudo, alpha, firth):
    """Covariance from the (penalized) observed information at alpha."""
    pseudo = _as_pseudo(pseudo)
    info = alpha_info(pseudo, alpha)
    if firth:
        info = info - _penalty_hessian_alpha(pseudo, alpha)
    return invert_psd(info, "the missingness-model information")


def fit_missingness(pseudo, firth=False, init=None, controls=None, level=0.95, method=None):
    """Newton fit of the missingness logistic model.

    Same convergence contract as the Emax fit: step-halving on the
    (penalized) log-likelihood, ridge fallback when Z^T V Z is numerically
    singular or ill-conditioned, nonconvergence flagged rather than raised.
    Starts from alpha = 0 unless ``init`` is given.
    """
    pseudo = _as_pseudo(pseudo)
    controls = controls or NewtonControls()
    q = pseudo.z.shape[1]
    if method is None:
        method = "FIRTH" if firth else "ML"
    if init is None:
        x0 = np.zeros(q)
    else:
        x0 = init.as_array() if isinstance(init, AlphaParams) else np.asarray(init, dtype=float)
        if x0.shape[0] != q:
            raise DimensionMismatchError(
                f"init has {x0.shape[0]} entries but the design has {q} columns"
            )
    x, f, iterations, converged, notes = _newton_alpha_core(
        pseudo, firth, x0, controls, polish=True
    )
    alpha_hat = AlphaParams.from_array(x)
    vcov, note = alpha_vcov(pseudo, alpha_hat, firth)
    if note:
        notes.append(note)
    return build_alpha_report(
        method=method,
        alpha=alpha_hat,
        vcov=vcov,
        iterations=iterations,
        converged=converged,
        objective=f,
        level=level,
        notes=notes,
    )
