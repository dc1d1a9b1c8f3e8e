"""Small shared numerical helpers."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import linalg as sla
from scipy import stats


@lru_cache(maxsize=64)
def norm_quantile(q):
    """Standard normal quantile (high-accuracy inverse CDF), cached."""
    return float(stats.norm.ppf(q))


def wald_interval(estimate, se, level):
    """Normal-approximation interval estimate +- z * se at the given level."""
    z = norm_quantile(0.5 + level / 2.0)
    half = z * se
    return (estimate - half, estimate + half)


def solve_ridged(matrix, rhs, ridge, cond_limit=1e12):
    """Solve ``matrix @ x = rhs`` with a ridge fallback.

    SPD systems go through a Cholesky solve; the squared ratio of the
    Cholesky diagonal lower-bounds the condition number, and estimates
    beyond ``cond_limit`` are treated as singular. Singular or indefinite
    systems fall back to a plain solve, then to ``ridge * mean(|diag|)``
    added to the diagonal, then to least squares. Returns ``(x, note)``
    where ``note`` is None unless the ridge (or worse) engaged.
    """
    matrix = np.asarray(matrix, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if np.all(np.isfinite(matrix)):
        try:
            c, low = sla.cho_factor(matrix, check_finite=False)
            diag = np.abs(np.diag(c))
            if (diag.max() / max(diag.min(), 1e-300)) ** 2 <= cond_limit:
                x = sla.cho_solve((c, low), rhs, check_finite=False)
                if np.all(np.isfinite(x)):
                    return x, None
        except np.linalg.LinAlgError:
            pass
        try:
            x = np.linalg.solve(matrix, rhs)
            if np.all(np.isfinite(x)) and np.linalg.cond(matrix) <= cond_limit:
                return x, None
        except np.linalg.LinAlgError:
            pass
    diag = np.abs(np.diag(matrix))
    scale = float(np.mean(diag)) if np.any(diag > 0) else 1.0
    bumped = matrix + ridge * scale * np.eye(matrix.shape[0])
    try:
        x = np.linalg.solve(bumped, rhs)
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError("non-finite solution")
        note = f"ridge {ridge:g} added to a numerically singular newton system"
    except np.linalg.LinAlgError:
        x = np.linalg.lstsq(bumped, rhs, rcond=None)[0]
        note = "least-squares fallback for a singular newton system"
    return x, note


def fast_solve(matrix, rhs, ridge, cond_proxy_limit=1e10):
    """Hot-path variant of :func:`solve_ridged`.

    Goes straight to a LAPACK solve and only falls back to the full
    ridge/condition policy when the solve fails, goes non-finite, or the
    diagonal ratio (a cheap condition lower bound) looks suspicious.
    """
    diag = np.abs(np.diag(matrix))
    if diag.min() > 0.0 and diag.max() / diag.min() < cond_proxy_limit:
        try:
            x = np.linalg.solve(matrix, rhs)
            if np.all(np.isfinite(x)):
                return x, None
        except np.linalg.LinAlgError:
            pass
    return solve_ridged(matrix, rhs, ridge)


def invert_psd(matrix, note_label):
    """Invert a (nominally PSD) matrix, falling back to a pseudo-inverse.

    Returns ``(inverse, note)``; ``note`` is None when the direct inverse
    succeeded and produced finite entries.
    """
    matrix = np.asarray(matrix, dtype=float)
    try:
        inv = np.linalg.inv(matrix)
        if np.all(np.isfinite(inv)):
            return inv, None
    except np.linalg.LinAlgError:
        pass
    return np.linalg.pinv(matrix), f"pseudo-inverse used for {note_label}"


def max_relative_change(new, old):
    """Componentwise |new - old| / max(1, |new|), reduced with max."""
    new = np.asarray(new, dtype=float)
    old = np.asarray(old, dtype=float)
    return float(np.max(np.abs(new - old) / np.maximum(1.0, np.abs(new))))
