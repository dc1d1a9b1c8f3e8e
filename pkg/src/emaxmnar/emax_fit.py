"""Weighted maximum-likelihood and Firth-penalized fitting of the Emax
sub-model over pseudo-observations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from ._numerics import fast_solve, invert_psd, wald_interval
from .exceptions import DoseLevelsError, SingularInformationError
from .model_core import EmaxParams, FitReport, _as_pseudo, grad_eta, logit

__all__ = [
    "NewtonControls",
    "emax_score",
    "emax_hessian",
    "fisher_info_theta",
    "fisher_info_theta_deriv",
    "jeffreys_penalty_theta",
    "firth_score_theta",
    "default_theta_init",
    "fit_emax",
]

ED50_FLOOR = 1e-8
_LOGDET_FLOOR = math.log(1e-300)
# Accepted Newton steps may lower the objective by at most this much, so the
# objective sequence is nondecreasing to the same tolerance.
_ASCENT_SLACK = 1e-12
# Cap on a single step's max relative component; ill-conditioned systems can
# emit astronomically long (still ascent) directions that halving alone
# cannot tame within the allowed halvings.
_MAX_RELATIVE_STEP = 10.0
# Penalized fits switch from Fisher scoring to true-Hessian Newton steps
# after this many iterations; scoring ignores the penalty curvature and can
# cycle when the penalty dominates (separated or near-degenerate data).
_SCORING_ITER_LIMIT = 25


def _cap_step(step, x):
    biggest = np.max(np.abs(step) / np.maximum(1.0, np.abs(x)))
    if biggest > _MAX_RELATIVE_STEP:
        return step * (_MAX_RELATIVE_STEP / biggest)
    return step

_SINGULAR_MESSAGE = (
    "Fisher information for the Emax parameters is singular; "
    "the design needs more dose levels or more data"
)


@dataclass(frozen=True)
class NewtonControls:
    """Inner Newton solver controls shared by both sub-model fits."""

    max_iter: int = 100
    tol: float = 1e-8
    max_step_halvings: int = 30
    ridge: float = 1e-8

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.tol <= 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_step_halvings < 0:
            raise ValueError(f"max_step_halvings must be >= 0, got {self.max_step_halvings}")
        if self.ridge < 0.0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")


def _curve_parts(pseudo, theta):
    den = theta.ed50 + pseudo.dose
    lin = theta.e0 + theta.emax * pseudo.dose / den
    pi = special.expit(lin)
    return den, pi


def emax_score(pseudo, theta):
    """Score of the weighted log-likelihood: sum w (y - pi) grad_eta."""
    pseudo = _as_pseudo(pseudo)
    _, pi = _curve_parts(pseudo, theta)
    g = grad_eta(pseudo.dose, theta)
    return g.T @ (pseudo.weight * (pseudo.yfill - pi))


def emax_hessian(pseudo, theta):
    """Hessian of the weighted log-likelihood, including the curvature
    correction from the nonlinear dose term."""
    pseudo = _as_pseudo(pseudo)
    den, pi = _curve_parts(pseudo, theta)
    g = grad_eta(pseudo.dose, theta)
    w = pseudo.weight
    H = (g * (w * (pi - 1.0) * pi)[:, None]).T @ g
    resid = w * (pseudo.yfill - pi)
    a12 = float(np.sum(resid * pseudo.dose / den**2))
    a22 = -2.0 * theta.emax * float(np.sum(resid * pseudo.dose / den**3))
    H[1, 2] -= a12
    H[2, 1] -= a12
    H[2, 2] -= a22
    return H


def fisher_info_theta(pseudo, theta):
    """Expected information sum w pi (1 - pi) grad_eta grad_eta^T (PSD)."""
    pseudo = _as_pseudo(pseudo)
    _, pi = _curve_parts(pseudo, theta)
    g = grad_eta(pseudo.dose, theta)
    v = pseudo.weight * pi * (1.0 - pi)
    return (g * v[:, None]).T @ g


def fisher_info_theta_deriv(pseudo, theta, method="analytic"):
    """Derivatives of the expected information with respect to each Emax
    parameter, stacked as shape (3, 3, 3) with ``out[k] = d info / d theta_k``.

    ``method="fd"`` uses central differences with step
    ``max(1, |theta_k|) * 1e-5`` as a fallback/cross-check of the analytic
    expressions.
    """
    pseudo = _as_pseudo(pseudo)
    if method == "fd":
        x = theta.as_array()
        out = np.empty((3, 3, 3))
        for k in range(3):
            h = 1e-5 * max(1.0, abs(x[k]))
            if k == 2:
                h = min(h, 0.49 * x[2])
            xp = x.copy()
            xm = x.copy()
            xp[k] += h
            xm[k] -= h
            ip = fisher_info_theta(pseudo, EmaxParams.from_array(xp))
            im = fisher_info_theta(pseudo, EmaxParams.from_array(xm))
            out[k] = (ip - im) / (2.0 * h)
        return out
    if method != "analytic":
        raise ValueError(f"unknown derivative method {method!r}")
    den, pi = _curve_parts(pseudo, theta)
    g = grad_eta(pseudo.dose, theta)
    d = pseudo.dose
    w = pseudo.weight
    v = w * pi * (1.0 - pi)
    u = v * (1.0 - 2.0 * pi)
    m = len(pseudo)
    dg = np.zeros((3, m, 3))
    dg[1, :, 2] = -d / den**2
    dg[2, :, 1] = -d / den**2
    dg[2, :, 2] = 2.0 * theta.emax * d / den**3
    out = np.empty((3, 3, 3))
    vg = g * v[:, None]
    for k in range(3):
        weighted = (g * (u * g[:, k])[:, None]).T @ g
        cross = dg[k].T @ vg
        out[k] = weighted + cross + cross.T
    return out


def _checked_info(pseudo, theta):
    info = fisher_info_theta(pseudo, theta)
    sign, logdet = np.linalg.slogdet(info)
    if sign <= 0 or logdet < _LOGDET_FLOOR:
        raise SingularInformationError(_SINGULAR_MESSAGE)
    return info, logdet


def jeffreys_penalty_theta(pseudo, theta):
    """Half log-determinant of the expected information of the curve
    parameters on the (e0, emax, log ed50) scale.

    Equals ``0.5 log det I(e0, emax, ed50) + log ed50`` by the Jacobian of
    the reparameterization. Penalizing on the reporting scale (the dose
    parameter is summarized as log ed50 throughout) is what reproduces the
    reference operating characteristics; the ed50-scale penalty tilts the
    dose estimate low.
    """
    pseudo = _as_pseudo(pseudo)
    _, logdet = _checked_info(pseudo, theta)
    return 0.5 * logdet + math.log(theta.ed50)


def _jeffreys_grad_theta(pseudo, theta):
    info, _ = _checked_info(pseudo, theta)
    inv = np.linalg.inv(info)
    deriv = fisher_info_theta_deriv(pseudo, theta)
    if not np.all(np.isfinite(deriv)):
        deriv = fisher_info_theta_deriv(pseudo, theta, method="fd")
    # tr(info^-1 dI/dtheta_k) with info symmetric, plus the log-scale
    # Jacobian term in the ed50 component
    out = 0.5 * np.array([np.sum(inv * deriv[k]) for k in range(3)])
    out[2] += 1.0 / theta.ed50
    return out


def firth_score_theta(pseudo, theta):
    """Gradient of the penalized objective
    ``loglik + jeffreys_penalty_theta`` (exact, including the log-scale
    Jacobian term in the ed50 component)."""
    pseudo = _as_pseudo(pseudo)
    return emax_score(pseudo, theta) + _jeffreys_grad_theta(pseudo, theta)


def _penalty_hessian_theta(pseudo, theta):
    # central differences of the analytic penalty gradient
    x = theta.as_array()
    out = np.empty((3, 3))
    for k in range(3):
        h = 1e-5 * max(1.0, abs(x[k]))
        if k == 2:
            h = min(h, 0.49 * x[2])
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        gp = _jeffreys_grad_theta(pseudo, EmaxParams.from_array(xp))
        gm = _jeffreys_grad_theta(pseudo, EmaxParams.from_array(xm))
        out[:, k] = (gp - gm) / (2.0 * h)
    return 0.5 * (out + out.T)


def default_theta_init(pseudo):
    """Starting values from the lowest- and highest-dose arm success rates
    (clamped to [0.02, 0.98]) and the median positive dose level."""
    pseudo = _as_pseudo(pseudo)
    levels = np.unique(pseudo.dose)

    def arm_rate(dose_level):
        rows = pseudo.dose == dose_level
        total = float(np.sum(pseudo.weight[rows]))
        if total <= 0.0:
            return 0.5
        return float(np.sum(pseudo.weight[rows] * pseudo.yfill[rows])) / total

    low = min(max(arm_rate(levels[0]), 0.02), 0.98)
    high = min(max(arm_rate(levels[-1]), 0.02), 0.98)
    positive = levels[levels > 0]
    ed50 = float(np.median(positive)) if positive.size else 1.0
    emax = logit(high) - logit(low)
    if abs(emax) < 1e-3:
        # emax = 0 zeroes the ed50 gradient column and makes the expected
        # information singular at the starting point
        emax = 1e-3 if emax >= 0.0 else -1e-3
    return EmaxParams(logit(low), emax, ed50)


def _newton_emax_core(pseudo, firth, x0, controls, polish=False):
    """Array-level Newton loop; returns (x, objective, iterations,
    converged, notes). Hot path shared by fit_emax and the EM M-step.

    With ``polish`` a penalized fit that settles under Fisher scoring takes
    extra true-Hessian steps until the parameter change passes the tolerance
    again, which drives the penalized score to machine level.
    """
    d = pseudo.dose
    y = pseudo.yfill
    w = pseudo.weight
    m = d.shape[0]
    x = np.asarray(x0, dtype=float).copy()
    x[2] = max(x[2], ED50_FLOOR)

    def evaluate(xc):
        # (objective, state) at a candidate; state carries reusable pieces
        den = xc[2] + d
        frac = d / den
        lin = xc[0] + xc[1] * frac
        pi = special.expit(lin)
        ll = float(np.sum(w * (y * lin - np.logaddexp(0.0, lin))))
        if not firth:
            return ll, (den, frac, pi, None, None, None)
        g = np.empty((m, 3))
        g[:, 0] = 1.0
        g[:, 1] = frac
        g[:, 2] = -xc[1] * frac / den
        v = w * pi * (1.0 - pi)
        info = (g * v[:, None]).T @ g
        sign, logdet = np.linalg.slogdet(info)
        if sign <= 0 or logdet < _LOGDET_FLOOR:
            return -math.inf, None
        return ll + 0.5 * logdet + math.log(xc[2]), (den, frac, pi, g, v, info)

    def loglik_hessian(xc, den, frac, pi, g):
        resid_c = w * (y - pi)
        H = (g * ((pi - 1.0) * pi * w)[:, None]).T @ g
        a12 = float(np.sum(resid_c * frac / den))
        a22 = -2.0 * xc[1] * float(np.sum(resid_c * frac / den**2))
        H[1, 2] -= a12
        H[2, 1] -= a12
        H[2, 2] -= a22
        return H

    def penalty_grad(xc, den, frac, pi, g, v, info):
        inv = np.linalg.inv(info)
        P = g @ inv
        quad = np.einsum("ij,ij->i", P, g)
        u_vec = v * (1.0 - 2.0 * pi)
        dg_shared = -frac / den  # d g_emax / d ed50 and d g_ed50 / d emax
        dg_corner = 2.0 * xc[1] * frac / den**2
        t0 = float(np.sum(u_vec * quad))
        t1 = float(np.sum(u_vec * frac * quad)) + 2.0 * float(np.sum(v * dg_shared * P[:, 2]))
        t2 = float(np.sum(u_vec * g[:, 2] * quad)) + 2.0 * float(
            np.sum(v * (dg_shared * P[:, 1] + dg_corner * P[:, 2]))
        )
        out = 0.5 * np.array([t0, t1, t2])
        out[2] += 1.0 / xc[2]
        return out

    def penalty_grad_at(xc):
        _, state_c = evaluate(xc)
        if state_c is None:
            raise SingularInformationError(_SINGULAR_MESSAGE)
        return penalty_grad(xc, *state_c)

    def penalty_hessian(xc):
        out = np.empty((3, 3))
        for k in range(3):
            h = 1e-5 * max(1.0, abs(xc[k]))
            if k == 2:
                h = min(h, 0.49 * xc[2])
            xp = xc.copy()
            xm = xc.copy()
            xp[k] += h
            xm[k] -= h
            out[:, k] = (penalty_grad_at(xp) - penalty_grad_at(xm)) / (2.0 * h)
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
            cand[2] = max(cand[2], ED50_FLOOR)
            fc, state_c = evaluate(cand)
            if math.isfinite(fc) and fc >= f - _ASCENT_SLACK:
                return cand, fc, state_c
            step = 0.5 * step
        return None, None, None

    for iterations in range(1, controls.max_iter + 1):
        den, frac, pi, g, v, info = state
        if g is None:
            g = np.empty((m, 3))
            g[:, 0] = 1.0
            g[:, 1] = frac
            g[:, 2] = -x[1] * frac / den
        resid = w * (y - pi)
        score = g.T @ resid
        if firth:
            score = score + penalty_grad(x, den, frac, pi, g, v, info)
            if newton_mode or iterations > _SCORING_ITER_LIMIT:
                # scoring ignores the penalty curvature and can cycle when
                # the penalty dominates; switch to true Newton steps
                try:
                    system = -(loglik_hessian(x, den, frac, pi, g) + penalty_hessian(x))
                except SingularInformationError:
                    system = info
            else:
                system = info
        else:
            system = -loglik_hessian(x, den, frac, pi, g)
        step, note = fast_solve(system, score, controls.ridge)
        if note and note not in notes:
            notes.append(note)
        cand, fc, state_c = attempt(_cap_step(step, x))
        if cand is None:
            # the (penalized) Hessian can be indefinite away from the
            # optimum; the expected information always gives an ascent
            # direction
            if info is None:
                v = w * pi * (1.0 - pi)
                info = (g * v[:, None]).T @ g
            if not np.array_equal(system, info):
                step, note = fast_solve(info, score, controls.ridge)
                if note and note not in notes:
                    notes.append(note)
                cand, fc, state_c = attempt(_cap_step(step, x))
        if cand is None:
            notes.append("step halving exhausted without improving the objective")
            break
        delta = max(
            abs(cand[0] - x[0]) / max(1.0, abs(cand[0])),
            abs(cand[1] - x[1]) / max(1.0, abs(cand[1])),
            abs(cand[2] - x[2]) / max(1.0, abs(cand[2])),
        )
        x = cand
        f = fc
        state = state_c
        if delta < controls.tol:
            if newton_mode or not (firth and polish):
                converged = True
                break
            newton_mode = True
    return x, f, iterations, converged, notes


def _require_dose_levels(pseudo):
    n_levels = np.unique(pseudo.dose).size
    if n_levels < 2:
        raise DoseLevelsError(
            f"Emax fit needs at least 2 distinct dose levels, got {n_levels}"
        )


def _exp_clipped(x):
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def build_theta_report(
    method, theta, vcov, iterations, converged, objective, level, notes=()
):
    """Assemble a dose-response FitReport from a covariance matrix."""
    notes = list(notes)
    diag = np.diag(vcov)
    if np.any(diag < 0.0):
        notes.append("negative variance clipped to zero")
    se = np.sqrt(np.clip(diag, 0.0, None))
    log_ed50 = math.log(theta.ed50)
    se_log = float(se[2] / theta.ed50)
    ci_log = wald_interval(log_ed50, se_log, level)
    ci = np.array(
        [
            wald_interval(theta.e0, float(se[0]), level),
            wald_interval(theta.emax, float(se[1]), level),
            (_exp_clipped(ci_log[0]), _exp_clipped(ci_log[1])),
        ]
    )
    return FitReport(
        method=method,
        theta=theta,
        alpha=None,
        vcov=vcov,
        se=se,
        ci=ci,
        log_ed50=log_ed50,
        se_log_ed50=se_log,
        ci_log_ed50=ci_log,
        iterations=iterations,
        converged=converged,
        objective=objective,
        level=level,
        notes=tuple(notes),
    )


def theta_vcov(pseudo, theta, firth):
    """Covariance from the (penalized) observed information at theta."""
    pseudo = _as_pseudo(pseudo)
    H = emax_hessian(pseudo, theta)
    if firth:
        H = H + _penalty_hessian_theta(pseudo, theta)
    return invert_psd(-H, "the Emax information")


def fit_emax(pseudo, firth=False, init=None, controls=None, level=0.95, method=None):
    """Newton fit of the Emax sub-model over weighted pseudo-observations.

    Maximizes the weighted log-likelihood, or the Jeffreys-penalized
    log-likelihood when ``firth`` is set, with step-halving whenever a step
    fails to increase the objective, a ridge fallback for singular systems,
    and the positivity projection ``ed50 <- max(ed50, 1e-8)`` applied to
    every candidate. Nonconvergence is reported via ``converged=False``,
    never raised.

    Parameters
    ----------
    pseudo
        PseudoData (or iterable of PseudoRecord) with at least two distinct
        dose levels.
    firth
        Add the Jeffreys penalty (half log-determinant of the expected
        information on the (e0, emax, log ed50) scale) to the objective.
    init
        Optional EmaxParams starting point; defaults to arm-rate heuristics.
    controls
        NewtonControls; package defaults when omitted.
    """
    pseudo = _as_pseudo(pseudo)
    _require_dose_levels(pseudo)
    controls = controls or NewtonControls()
    if method is None:
        method = "FIRTH" if firth else "ML"
    x0 = (init or default_theta_init(pseudo)).as_array()
    x, f, iterations, converged, notes = _newton_emax_core(
        pseudo, firth, x0, controls, polish=True
    )
    theta_hat = EmaxParams.from_array(x)
    vcov, note = theta_vcov(pseudo, theta_hat, firth)
    if note:
        notes.append(note)
    return build_theta_report(
        method=method,
        theta=theta_hat,
        vcov=vcov,
        iterations=iterations,
        converged=converged,
        objective=f,
        level=level,
        notes=notes,
    )
