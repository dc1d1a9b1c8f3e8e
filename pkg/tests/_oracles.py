"""Independent oracle implementations used by the tests.

Everything here is deliberately written from the raw formulas with plain
python loops or scipy primitives, not via the package's own code paths, so
the tests compare two independent routes to the same quantity.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit as sp_expit


def fd_gradient(f, x, rel=1e-5):
    """Central finite-difference gradient with per-component relative steps."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape[0])
    for k in range(x.shape[0]):
        h = rel * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        out[k] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def fd_jacobian(f, x, rel=1e-5):
    """Central finite-difference Jacobian of a vector-valued function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.shape[0]):
        h = rel * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h))
    return np.column_stack(cols)


def fd_hessian(f, x, rel=1e-4):
    """Central finite-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    k = x.shape[0]
    steps = [rel * max(1.0, abs(v)) for v in x]
    out = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            xpp = x.copy()
            xpm = x.copy()
            xmp = x.copy()
            xmm = x.copy()
            xpp[i] += steps[i]
            xpp[j] += steps[j]
            xpm[i] += steps[i]
            xpm[j] -= steps[j]
            xmp[i] -= steps[i]
            xmp[j] += steps[j]
            xmm[i] -= steps[i]
            xmm[j] -= steps[j]
            val = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * steps[i] * steps[j])
            out[i, j] = out[j, i] = val
    return out


def rel_err(approx, reference):
    """Max componentwise deviation scaled by the reference's sup norm."""
    approx = np.asarray(approx, dtype=float)
    reference = np.asarray(reference, dtype=float)
    scale = max(1e-8, float(np.max(np.abs(reference))))
    return float(np.max(np.abs(approx - reference))) / scale


def logdet_cofactor_3x3(m):
    """log det of a 3x3 matrix via explicit cofactor expansion."""
    det = (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )
    return math.log(det)


def sum_emax_loglik(rows, e0, emax, ed50):
    """Plain-loop weighted Bernoulli log-likelihood of (dose, yfill, weight) rows."""
    total = 0.0
    for dose, yfill, weight in rows:
        lin = e0 + emax * dose / (ed50 + dose)
        total += weight * (yfill * lin - math.log1p(math.exp(-abs(lin))) - max(lin, 0.0))
    return total


def sum_alpha_loglik(rows, coef):
    """Plain-loop weighted Bernoulli log-likelihood of (z, r, weight) rows."""
    total = 0.0
    for z, r, weight in rows:
        lin = sum(zj * cj for zj, cj in zip(z, coef))
        total += weight * (r * lin - math.log1p(math.exp(-abs(lin))) - max(lin, 0.0))
    return total


def bayes_pair_weight(pi, p_when_0, p_when_1):
    """Posterior weight of the outcome-1 completion of one missing subject."""
    num1 = pi * p_when_1
    num0 = (1.0 - pi) * p_when_0
    return num1 / (num0 + num1)


def enum_observed_loglik(doses, outcomes, zrows_by_y, gamma, n_theta=3):
    """Observed-data log-likelihood enumerated over missing completions.

    ``outcomes[i]`` is 0/1 or None; ``zrows_by_y(i, y)`` returns the
    missingness design row of subject i with its outcome slot filled with y.
    ``gamma`` stacks (e0, emax, ed50, alpha...).
    """
    e0, emax, ed50 = gamma[:n_theta]
    alpha = np.asarray(gamma[n_theta:], dtype=float)
    total = 0.0
    for i, (dose, outcome) in enumerate(zip(doses, outcomes)):
        pi = sp_expit(e0 + emax * dose / (ed50 + dose))
        if outcome is not None:
            fy = pi if outcome == 1 else 1.0 - pi
            p = sp_expit(float(np.dot(zrows_by_y(i, outcome), alpha)))
            total += math.log(fy) + math.log(1.0 - p)
        else:
            acc = 0.0
            for y in (0, 1):
                fy = pi if y == 1 else 1.0 - pi
                p = sp_expit(float(np.dot(zrows_by_y(i, y), alpha)))
                acc += fy * p
            total += math.log(acc)
    return total


def emax_profile_grid(doses, successes, totals, e0_axis, emax_axis, led50_axis):
    """Dense grid search of the complete-data Emax log-likelihood.

    ``doses``/``successes``/``totals`` describe per-dose-level counts.
    Returns (argmax array on the (e0, emax, log ed50) scale, max value).
    The sweep is vectorized over the (e0, emax) plane per log-ed50 slice.
    """
    doses = np.asarray(doses, dtype=float)
    successes = np.asarray(successes, dtype=float)
    totals = np.asarray(totals, dtype=float)
    e0g, emg = np.meshgrid(e0_axis, emax_axis, indexing="ij")
    best_val = -np.inf
    best = None
    for led in led50_axis:
        ed50 = math.exp(led)
        frac = doses / (ed50 + doses)
        val = np.zeros_like(e0g)
        for f, s, t in zip(frac, successes, totals):
            lin = e0g + emg * f
            val += s * lin - t * np.logaddexp(0.0, lin)
        idx = np.unravel_index(np.argmax(val), val.shape)
        if val[idx] > best_val:
            best_val = float(val[idx])
            best = np.array([e0_axis[idx[0]], emax_axis[idx[1]], led])
    return best, best_val
