"""Domain types and elementary functions for the binary Emax dose-response
model and the logistic model of outcome missingness.

Parameter ordering is fixed everywhere in the package: dose-response
parameters are ``(e0, emax, ed50)`` and missingness coefficients are
``(intercept, covariates..., dose, outcome)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .exceptions import DimensionMismatchError

__all__ = [
    "EmaxParams",
    "AlphaParams",
    "TrialRecord",
    "PseudoRecord",
    "PseudoData",
    "FitReport",
    "expit",
    "logit",
    "eta",
    "success_prob",
    "grad_eta",
    "a_matrix",
    "missing_prob",
    "emax_loglik",
    "alpha_loglik",
    "trial_records_from_arrays",
]

# Open-interval clamp for probabilities: the largest double below 1 and the
# smallest above 0, so log/odds ratios stay finite downstream.
_BELOW_ONE = float(np.nextafter(1.0, 0.0))
_ABOVE_ZERO = float(np.nextafter(0.0, 1.0))


def expit(x):
    """Inverse logit ``1 / (1 + exp(-x))`` clipped to the open interval (0, 1).

    Stable for arguments well beyond +-1e3; scalar input gives a float,
    array input an ndarray.
    """
    out = np.clip(special.expit(x), _ABOVE_ZERO, _BELOW_ONE)
    if np.ndim(x) == 0:
        return float(out)
    return out


def logit(p):
    """Log odds of a probability strictly inside (0, 1)."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"logit needs p in (0, 1), got {p}")
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class EmaxParams:
    """Three-parameter Emax curve on the logit scale.

    ``e0`` is the logit response at dose zero, ``emax`` the logit increment
    approached at infinite dose, and ``ed50`` the (positive) dose producing
    half of that increment.
    """

    e0: float
    emax: float
    ed50: float

    def __post_init__(self):
        object.__setattr__(self, "e0", float(self.e0))
        object.__setattr__(self, "emax", float(self.emax))
        object.__setattr__(self, "ed50", float(self.ed50))
        if not (
            math.isfinite(self.e0)
            and math.isfinite(self.emax)
            and math.isfinite(self.ed50)
        ):
            raise ValueError(f"Emax parameters must be finite, got {self}")
        if self.ed50 <= 0.0:
            raise ValueError(f"ed50 must be positive, got {self.ed50}")

    def as_array(self):
        return np.array([self.e0, self.emax, self.ed50])

    @classmethod
    def from_array(cls, values):
        e0, emax, ed50 = np.asarray(values, dtype=float)
        return cls(e0, emax, ed50)


@dataclass(frozen=True)
class AlphaParams:
    """Coefficients of the logistic missingness model.

    Ordered as ``(intercept, covariates..., dose, outcome)``; design rows
    built from trial records always carry ``1 + p + 2`` entries in that
    order. A zero outcome coefficient means missingness does not depend on
    the unobserved response.
    """

    coefficients: tuple

    def __post_init__(self):
        coefs = tuple(float(c) for c in np.asarray(self.coefficients, dtype=float).ravel())
        if not coefs:
            raise ValueError("missingness model needs at least one coefficient")
        if not all(math.isfinite(c) for c in coefs):
            raise ValueError(f"missingness coefficients must be finite, got {coefs}")
        object.__setattr__(self, "coefficients", coefs)

    def __len__(self):
        return len(self.coefficients)

    def as_array(self):
        return np.array(self.coefficients)

    @classmethod
    def from_array(cls, values):
        return cls(tuple(np.asarray(values, dtype=float).ravel()))

    @property
    def outcome_coefficient(self):
        return self.coefficients[-1]

    @property
    def dose_coefficient(self):
        return self.coefficients[-2]


@dataclass(frozen=True)
class TrialRecord:
    """One subject: assigned dose, binary outcome, auxiliary covariates.

    ``outcome`` is None when the response is missing; the missingness
    indicator is always derived from that, never stored separately.
    """

    id: object
    dose: float
    outcome: int | None
    covariates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "dose", float(self.dose))
        if not math.isfinite(self.dose) or self.dose < 0.0:
            raise ValueError(f"dose must be finite and nonnegative, got {self.dose} (record {self.id})")
        if self.outcome is not None:
            out = float(self.outcome)
            if out not in (0.0, 1.0):
                raise ValueError(f"outcome must be 0, 1 or None, got {self.outcome} (record {self.id})")
            object.__setattr__(self, "outcome", int(out))
        covs = tuple(float(c) for c in self.covariates)
        if not all(math.isfinite(c) for c in covs):
            raise ValueError(f"covariates must be finite, got {covs} (record {self.id})")
        object.__setattr__(self, "covariates", covs)

    @property
    def missing(self):
        return self.outcome is None


@dataclass(frozen=True)
class PseudoRecord:
    """A trial record with its outcome slot filled and an attached weight.

    Observed records expand to a single pseudo-record with unit weight and
    ``yfill`` equal to the observed outcome; missing records expand to a
    weight pair (outcome filled as 0 and as 1) summing to one.
    """

    base: TrialRecord
    yfill: int
    weight: float

    def __post_init__(self):
        if self.yfill not in (0, 1):
            raise ValueError(f"yfill must be 0 or 1, got {self.yfill}")
        w = float(self.weight)
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"weight must lie in [0, 1], got {w}")
        object.__setattr__(self, "weight", w)
        if not self.base.missing:
            if self.yfill != self.base.outcome:
                raise ValueError("observed record must be filled with its own outcome")
            if w != 1.0:
                raise ValueError("observed record must carry weight 1")


class PseudoData:
    """Columnar collection of weighted pseudo-observations.

    Each row holds the filled outcome ``yfill``, the subject's missingness
    indicator ``r``, the weight, and the missingness design row
    ``z = (1, covariates..., dose, yfill)``. Missing subjects occupy two
    consecutive rows (outcome filled 0 then 1); observed subjects one row.
    ``pair_rows`` indexes the first row of each missing pair.

    Instances are treated as immutable; reweighting returns a new view via
    :meth:`with_weights`.
    """

    __slots__ = ("records", "subject", "dose", "yfill", "r", "weight", "z", "pair_rows")

    def __init__(self, *, subject, dose, yfill, r, weight, z, records=None, pair_rows=None):
        subject = np.asarray(subject, dtype=int)
        dose = np.asarray(dose, dtype=float)
        yfill = np.asarray(yfill, dtype=float)
        r = np.asarray(r, dtype=float)
        weight = np.asarray(weight, dtype=float)
        z = np.asarray(z, dtype=float)
        m = dose.shape[0]
        if not (subject.shape == yfill.shape == r.shape == weight.shape == (m,)):
            raise DimensionMismatchError("pseudo-data columns must share one length")
        if z.ndim != 2 or z.shape[0] != m:
            raise DimensionMismatchError(
                f"design matrix has shape {z.shape}, expected ({m}, q)"
            )
        if np.any((yfill != 0.0) & (yfill != 1.0)):
            raise ValueError("yfill entries must be 0 or 1")
        if np.any((r != 0.0) & (r != 1.0)):
            raise ValueError("missingness indicators must be 0 or 1")
        if np.any(weight < 0.0) or np.any(weight > 1.0):
            raise ValueError("weights must lie in [0, 1]")
        if pair_rows is None:
            first = np.flatnonzero((r == 1.0) & (yfill == 0.0))
            pair_rows = first[(first + 1 < m)]
            pair_rows = pair_rows[subject[pair_rows + 1] == subject[pair_rows]]
        self.records = tuple(records) if records is not None else None
        self.subject = subject
        self.dose = dose
        self.yfill = yfill
        self.r = r
        self.weight = weight
        self.z = z
        self.pair_rows = np.asarray(pair_rows, dtype=int)

    def __len__(self):
        return self.dose.shape[0]

    @property
    def n_coefficients(self):
        return self.z.shape[1]

    @property
    def n_subjects(self):
        return int(self.subject.max()) + 1 if len(self) else 0

    @property
    def n_missing(self):
        return self.pair_rows.shape[0]

    def with_weights(self, weight):
        """Copy sharing every column except the weights."""
        weight = np.asarray(weight, dtype=float)
        if weight.shape != self.weight.shape:
            raise DimensionMismatchError(
                f"weight vector has shape {weight.shape}, expected {self.weight.shape}"
            )
        return PseudoData(
            subject=self.subject,
            dose=self.dose,
            yfill=self.yfill,
            r=self.r,
            weight=weight,
            z=self.z,
            records=self.records,
            pair_rows=self.pair_rows,
        )

    def subject_weight_sums(self):
        sums = np.zeros(self.n_subjects)
        np.add.at(sums, self.subject, self.weight)
        return sums

    def __iter__(self):
        if self.records is None:
            raise ValueError("this pseudo-data was built from raw arrays, not records")
        for i in range(len(self)):
            yield PseudoRecord(
                base=self.records[self.subject[i]],
                yfill=int(self.yfill[i]),
                weight=float(self.weight[i]),
            )

    @classmethod
    def from_records(cls, pseudo_records):
        """Build the columnar form from an iterable of PseudoRecord."""
        rows = list(pseudo_records)
        if not rows:
            raise ValueError("cannot build pseudo-data from an empty record list")
        bases = []
        index = {}
        for row in rows:
            key = id(row.base)
            if key not in index:
                index[key] = len(bases)
                bases.append(row.base)
        p = len(bases[0].covariates)
        if any(len(b.covariates) != p for b in bases):
            raise DimensionMismatchError("all records must share one covariate length")
        m = len(rows)
        subject = np.fromiter((index[id(row.base)] for row in rows), dtype=int, count=m)
        dose = np.fromiter((row.base.dose for row in rows), dtype=float, count=m)
        yfill = np.fromiter((row.yfill for row in rows), dtype=float, count=m)
        r = np.fromiter((1.0 if row.base.missing else 0.0 for row in rows), dtype=float, count=m)
        weight = np.fromiter((row.weight for row in rows), dtype=float, count=m)
        z = np.empty((m, p + 3))
        z[:, 0] = 1.0
        for j in range(p):
            z[:, 1 + j] = [row.base.covariates[j] for row in rows]
        z[:, p + 1] = dose
        z[:, p + 2] = yfill
        return cls(
            subject=subject, dose=dose, yfill=yfill, r=r, weight=weight, z=z, records=bases
        )


def _as_pseudo(pseudo):
    if isinstance(pseudo, PseudoData):
        return pseudo
    return PseudoData.from_records(pseudo)


def trial_records_from_arrays(dose, outcome, covariates=None, ids=None):
    """Build TrialRecord objects from parallel arrays.

    ``outcome`` may contain NaN (or None) to mark missing responses;
    ``covariates`` is an optional (n, p) array.
    """
    dose = np.asarray(dose, dtype=float).ravel()
    n = dose.shape[0]
    out = np.asarray(
        [np.nan if v is None else float(v) for v in np.asarray(outcome).ravel()], dtype=float
    )
    if out.shape[0] != n:
        raise DimensionMismatchError(
            f"{n} doses but {out.shape[0]} outcomes"
        )
    if covariates is None:
        covariates = np.empty((n, 0))
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates.reshape(-1, 1)
    if covariates.shape[0] != n:
        raise DimensionMismatchError(
            f"{n} doses but {covariates.shape[0]} covariate rows"
        )
    if ids is None:
        ids = range(n)
    records = []
    for i, rid in zip(range(n), ids):
        y = None if math.isnan(out[i]) else int(out[i])
        records.append(
            TrialRecord(id=rid, dose=dose[i], outcome=y, covariates=tuple(covariates[i]))
        )
    return records


# --- elementary model functions -------------------------------------------


def eta(dose, theta):
    """Logit-scale response ``e0 + emax * dose / (ed50 + dose)``."""
    d = np.asarray(dose, dtype=float)
    out = theta.e0 + theta.emax * d / (theta.ed50 + d)
    if np.ndim(dose) == 0:
        return float(out)
    return out


def success_prob(dose, theta):
    """Success probability at a dose: ``expit(eta(dose, theta))``."""
    return expit(eta(dose, theta))


def grad_eta(dose, theta):
    """Gradient of eta in the fixed order (e0, emax, ed50).

    Scalar dose gives shape (3,), an array of doses shape (n, 3).
    """
    d = np.asarray(dose, dtype=float)
    den = theta.ed50 + d
    g = np.empty(d.shape + (3,))
    g[..., 0] = 1.0
    g[..., 1] = d / den
    g[..., 2] = -theta.emax * d / den**2
    return g


def a_matrix(dose, yfill, theta):
    """Curvature correction of the Emax Hessian from the nonlinear dose term.

    Only the (emax, ed50) block is nonzero:
    ``A[1, 2] = (y - pi) d / (ed50 + d)^2`` and
    ``A[2, 2] = -2 (y - pi) d emax / (ed50 + d)^3``.
    Scalar inputs give shape (3, 3), arrays shape (n, 3, 3).
    """
    d = np.asarray(dose, dtype=float)
    y = np.asarray(yfill, dtype=float)
    pi = expit(theta.e0 + theta.emax * d / (theta.ed50 + d))
    resid = y - pi
    den = theta.ed50 + d
    off = resid * d / den**2
    corner = -2.0 * resid * d * theta.emax / den**3
    A = np.zeros(d.shape + (3, 3))
    A[..., 1, 2] = off
    A[..., 2, 1] = off
    A[..., 2, 2] = corner
    return A


def missing_prob(z, alpha):
    """Probability that the outcome is missing, given design row(s) z."""
    a = alpha.as_array() if isinstance(alpha, AlphaParams) else np.asarray(alpha, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != a.shape[0]:
        raise DimensionMismatchError(
            f"design row length {z.shape[-1]} does not match coefficient length {a.shape[0]}"
        )
    return expit(z @ a)


def emax_loglik(pseudo, theta):
    """Weighted Bernoulli log-likelihood of the filled outcomes under theta."""
    pseudo = _as_pseudo(pseudo)
    lin = theta.e0 + theta.emax * pseudo.dose / (theta.ed50 + pseudo.dose)
    return float(np.sum(pseudo.weight * (pseudo.yfill * lin - np.logaddexp(0.0, lin))))


def alpha_loglik(pseudo, alpha):
    """Weighted Bernoulli log-likelihood of the missingness indicators."""
    pseudo = _as_pseudo(pseudo)
    a = alpha.as_array() if isinstance(alpha, AlphaParams) else np.asarray(alpha, dtype=float)
    if pseudo.z.shape[1] != a.shape[0]:
        raise DimensionMismatchError(
            f"design row length {pseudo.z.shape[1]} does not match coefficient length {a.shape[0]}"
        )
    lin = pseudo.z @ a
    return float(np.sum(pseudo.weight * (pseudo.r * lin - np.logaddexp(0.0, lin))))


@dataclass(frozen=True, eq=False)
class FitReport:
    """Estimates and inference for one fitted sub-model.

    Dose-response fits carry ``theta`` with ``vcov``/``se``/``ci`` on the
    (e0, emax, ed50) scale; the ed50 interval is built on the log scale and
    back-transformed, and the log-scale summary is exposed via
    ``log_ed50``/``se_log_ed50``/``ci_log_ed50`` (delta method,
    ``se(log ed50) = se(ed50) / ed50``). Missingness fits carry ``alpha``
    with the arrays covering its coefficients.
    """

    method: str
    theta: EmaxParams | None
    alpha: AlphaParams | None
    vcov: np.ndarray
    se: np.ndarray
    ci: np.ndarray
    log_ed50: float | None
    se_log_ed50: float | None
    ci_log_ed50: tuple | None
    iterations: int
    converged: bool
    objective: float
    level: float
    notes: tuple = ()

    def reporting_estimates(self):
        """Dose-response summary on the (E0, Emax, log_ED50) scale.

        Returns ``{name: (estimate, se, (lower, upper))}``.
        """
        if self.theta is None:
            raise ValueError("reporting_estimates needs a dose-response fit")
        return {
            "E0": (self.theta.e0, float(self.se[0]), (float(self.ci[0, 0]), float(self.ci[0, 1]))),
            "Emax": (self.theta.emax, float(self.se[1]), (float(self.ci[1, 0]), float(self.ci[1, 1]))),
            "log_ED50": (self.log_ed50, self.se_log_ed50, self.ci_log_ed50),
        }
