"""Trial data generator, seeded replication harness with operating
characteristics, and bootstrap dose-response curves.

All randomness flows through numpy's counter-based Philox generator. A run
with seed s derives the stream for replicate (or resample) k from
``SeedSequence((s, k))``, a pure function of (s, k), so results do not
depend on the parallelism level.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .baselines import fit_cc, fit_nri
from .em_engine import EmControls, em_fit
from .emax_fit import NewtonControls
from .exceptions import BootstrapError, EmaxMnarError
from .model_core import (
    EmaxParams,
    expit,
    logit,
    success_prob,
    trial_records_from_arrays,
)

__all__ = [
    "DEFAULT_DOSES",
    "DEFAULT_ALPHA",
    "METHODS",
    "PARAMETER_NAMES",
    "SimDesign",
    "MetricsRow",
    "ReplicateRow",
    "CurvePoint",
    "BootstrapCurve",
    "child_seed",
    "generate_trial_arrays",
    "generate_trial",
    "fit_by_method",
    "replicate_estimates",
    "aggregate_metrics",
    "run_replications",
    "bootstrap_dose_response",
]

logger = logging.getLogger(__name__)

DEFAULT_DOSES = (0.0, 7.5, 22.5, 75.0, 225.0)
DEFAULT_ALPHA = (-2.5, 3.0, 0.0, -0.05, 1.0)
METHODS = ("CC", "NRI", "IL", "FIL")
PARAMETER_NAMES = ("E0", "Emax", "log_ED50")

# a replicate only counts toward the metrics when its fit converged with
# bounded estimates and finite standard errors
VALID_ESTIMATE_BOUND = 1e3


def _default_theta_true():
    return EmaxParams(logit(0.1), logit(0.8) - logit(0.1), 7.5)


@dataclass(frozen=True)
class SimDesign:
    """Design of one simulated trial.

    ``n`` subjects are split evenly across the dose arms; two independent
    standard-normal covariates are drawn per subject and enter the
    missingness design as ``(1, x1, x2, dose, outcome)``, so ``alpha_true``
    has five entries.
    """

    n: int
    doses: tuple = DEFAULT_DOSES
    theta_true: EmaxParams = field(default_factory=_default_theta_true)
    alpha_true: tuple = DEFAULT_ALPHA
    seed: int = 0

    def __post_init__(self):
        doses = tuple(float(d) for d in self.doses)
        object.__setattr__(self, "doses", doses)
        if len(set(doses)) != len(doses) or any(d < 0 for d in doses):
            raise ValueError(f"doses must be distinct and nonnegative, got {doses}")
        if self.n < len(doses) or self.n % len(doses) != 0:
            raise ValueError(
                f"n={self.n} must be a positive multiple of the {len(doses)} dose arms"
            )
        alpha = tuple(float(a) for a in self.alpha_true)
        if len(alpha) != 5:
            raise ValueError(
                f"alpha_true needs 5 entries (intercept, x1, x2, dose, outcome), got {len(alpha)}"
            )
        object.__setattr__(self, "alpha_true", alpha)
        if int(self.seed) < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class MetricsRow:
    """Operating characteristics of one (parameter, method) cell."""

    parameter: str
    method: str
    estimate: float
    mbe: float
    mse: float
    est_se: float
    cp: float
    est_length: float
    s: int


@dataclass(frozen=True)
class ReplicateRow:
    """One replicate's estimate for one (method, parameter) pair."""

    replicate: int
    method: str
    parameter: str
    estimate: float
    se: float
    lower: float
    upper: float
    valid: bool


@dataclass(frozen=True)
class CurvePoint:
    dose: float
    estimate: float
    lower: float
    upper: float


@dataclass(frozen=True)
class BootstrapCurve:
    """Pointwise percentile band for the dose-response curve."""

    method: str
    level: float
    n_boot: int
    n_dropped: int
    points: tuple


def child_seed(seed, index):
    """Pure function of (seed, index) giving the child stream seed."""
    return int(np.random.SeedSequence((int(seed), int(index))).generate_state(1, np.uint64)[0])


def _rng(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def generate_trial_arrays(design):
    """Raw generated arrays before masking: (dose, covariates, outcome, missing).

    Draw order (documented for reproducibility): covariates as one
    (n, 2) standard-normal block, then outcome uniforms, then missingness
    uniforms. Doses are arm-major: all subjects of the lowest dose first.
    """
    rng = _rng(design.seed)
    per_arm = design.n // len(design.doses)
    dose = np.repeat(np.asarray(design.doses, dtype=float), per_arm)
    x = rng.standard_normal((design.n, 2))
    pi = success_prob(dose, design.theta_true)
    y = (rng.random(design.n) < pi).astype(float)
    z = np.column_stack([np.ones(design.n), x[:, 0], x[:, 1], dose, y])
    p_miss = expit(z @ np.asarray(design.alpha_true))
    r = (rng.random(design.n) < p_miss).astype(float)
    return dose, x, y, r


def generate_trial(design):
    """Generate one masked trial as TrialRecord objects (deterministic in
    ``design.seed``; outcomes with missingness indicator 1 are dropped)."""
    dose, x, y, r = generate_trial_arrays(design)
    outcome = y.copy()
    outcome[r == 1.0] = np.nan
    return trial_records_from_arrays(dose, outcome, covariates=x)


def _em_controls(em_controls, newton_controls):
    if em_controls is not None:
        if newton_controls is not None and em_controls.inner is not newton_controls:
            return replace(em_controls, inner=newton_controls)
        return em_controls
    inner = newton_controls or NewtonControls()
    return EmControls(inner=inner)


def fit_by_method(
    records,
    method,
    *,
    firth=False,
    em_controls=None,
    newton_controls=None,
    level=0.95,
    theta_init=None,
    alpha_init=None,
    compute_vcov=True,
):
    """Dispatch one analysis method.

    Returns ``(theta_report, alpha_report, emfit)``; the last two are None
    for the CC/NRI baselines. ``firth`` only applies to the baselines (the
    EM methods fix it through the IL/FIL tag).
    """
    if method == "CC":
        rep = fit_cc(records, firth=firth, controls=newton_controls, level=level, init=theta_init)
        return rep, None, None
    if method == "NRI":
        rep = fit_nri(records, firth=firth, controls=newton_controls, level=level, init=theta_init)
        return rep, None, None
    if method in ("IL", "FIL"):
        fit = em_fit(
            records,
            method=method,
            controls=_em_controls(em_controls, newton_controls),
            level=level,
            theta_init=theta_init,
            alpha_init=alpha_init,
            compute_vcov=compute_vcov,
            track_objective=compute_vcov,
        )
        return fit.theta_report, fit.alpha_report, fit
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _method_rows(records, method, rep_index, em_controls, newton_controls, level):
    nan = float("nan")
    try:
        theta_rep, _, emfit = fit_by_method(
            records,
            method,
            em_controls=em_controls,
            newton_controls=newton_controls,
            level=level,
        )
    except EmaxMnarError as exc:
        logger.warning("replicate %d: %s fit failed: %s", rep_index, method, exc)
        return [
            ReplicateRow(rep_index, method, name, nan, nan, nan, nan, False)
            for name in PARAMETER_NAMES
        ]
    converged = emfit.converged if emfit is not None else theta_rep.converged
    theta = theta_rep.theta
    summary = theta_rep.reporting_estimates()
    ses = [summary[name][1] for name in PARAMETER_NAMES]
    valid = (
        converged
        and max(abs(theta.e0), abs(theta.emax), abs(theta.ed50)) < VALID_ESTIMATE_BOUND
        and all(math.isfinite(s) for s in ses)
    )
    return [
        ReplicateRow(
            rep_index,
            method,
            name,
            float(summary[name][0]),
            float(summary[name][1]),
            float(summary[name][2][0]),
            float(summary[name][2][1]),
            valid,
        )
        for name in PARAMETER_NAMES
    ]


def _one_replicate(design, rep_index, methods, em_controls, newton_controls, level):
    child = replace(design, seed=child_seed(design.seed, rep_index))
    records = generate_trial(child)
    rows = []
    for method in methods:
        rows.extend(
            _method_rows(records, method, rep_index, em_controls, newton_controls, level)
        )
    return rows


def _ordered_methods(methods):
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; expected a subset of {METHODS}")
    return tuple(m for m in METHODS if m in methods)


def replicate_estimates(
    design,
    methods,
    n_reps,
    parallelism=1,
    em_controls=None,
    newton_controls=None,
    level=0.95,
):
    """Long table of per-replicate estimates, one row per
    replicate x method x parameter. Deterministic for a given design at any
    parallelism level."""
    if n_reps < 1:
        raise ValueError(f"n_reps must be >= 1, got {n_reps}")
    methods = _ordered_methods(methods)
    args = (methods, em_controls, newton_controls, level)
    if parallelism and parallelism > 1:
        chunks = Parallel(n_jobs=parallelism)(
            delayed(_one_replicate)(design, k, *args) for k in range(n_reps)
        )
    else:
        chunks = [_one_replicate(design, k, *args) for k in range(n_reps)]
    return [row for chunk in chunks for row in chunk]


def aggregate_metrics(rows, design):
    """Table-style operating characteristics from a long replicate table.

    MBE is the mean of (estimate - truth), MSE the mean of its square, CP
    the fraction of intervals containing the truth, and the interval length
    is averaged; each cell uses its s valid replicates.
    """
    truth = {
        "E0": design.theta_true.e0,
        "Emax": design.theta_true.emax,
        "log_ED50": math.log(design.theta_true.ed50),
    }
    methods = tuple(m for m in METHODS if any(row.method == m for row in rows))
    out = []
    for parameter in PARAMETER_NAMES:
        for method in methods:
            cell = [
                row
                for row in rows
                if row.method == method and row.parameter == parameter and row.valid
            ]
            s = len(cell)
            if s == 0:
                out.append(
                    MetricsRow(parameter, method, *(float("nan"),) * 6, s=0)
                )
                continue
            est = np.array([row.estimate for row in cell])
            se = np.array([row.se for row in cell])
            lower = np.array([row.lower for row in cell])
            upper = np.array([row.upper for row in cell])
            true = truth[parameter]
            out.append(
                MetricsRow(
                    parameter=parameter,
                    method=method,
                    estimate=float(np.mean(est)),
                    mbe=float(np.mean(est - true)),
                    mse=float(np.mean((est - true) ** 2)),
                    est_se=float(np.mean(se)),
                    cp=float(np.mean((lower <= true) & (true <= upper))),
                    est_length=float(np.mean(upper - lower)),
                    s=s,
                )
            )
    return out


def run_replications(
    design,
    methods,
    n_reps,
    parallelism=1,
    em_controls=None,
    newton_controls=None,
    level=0.95,
):
    """Generate, fit and summarize ``n_reps`` replicates of a design."""
    rows = replicate_estimates(
        design,
        methods,
        n_reps,
        parallelism=parallelism,
        em_controls=em_controls,
        newton_controls=newton_controls,
        level=level,
    )
    return aggregate_metrics(rows, design)


def _stratified_indices(rng, arm_indices):
    parts = [arm[rng.integers(0, arm.size, size=arm.size)] for arm in arm_indices]
    return np.concatenate(parts)


def _one_resample(records, arm_indices, method, seed_pair, fit_kwargs):
    rng = _rng(child_seed(*seed_pair))
    idx = _stratified_indices(rng, arm_indices)
    sample = [records[i] for i in idx]
    try:
        theta_rep, _, emfit = fit_by_method(sample, method, compute_vcov=False, **fit_kwargs)
    except EmaxMnarError:
        return None
    converged = emfit.converged if emfit is not None else theta_rep.converged
    theta = theta_rep.theta
    if not converged or max(abs(theta.e0), abs(theta.emax), abs(theta.ed50)) >= VALID_ESTIMATE_BOUND:
        return None
    return theta


def bootstrap_dose_response(
    data,
    method="FIL",
    n_boot=1000,
    level=0.95,
    grid=None,
    seed=0,
    parallelism=1,
    em_controls=None,
    newton_controls=None,
):
    """Percentile bootstrap band for the dose-response probabilities.

    Subjects are resampled with replacement within each dose arm (so arm
    sizes and the set of dose levels are preserved), the chosen method is
    refit on every resample warm-started at the full-data solution, and the
    pointwise interval at each grid dose is the percentile interval of the
    resampled curves. The point estimate is the full-data curve.
    Nonconverged resamples are dropped and counted; more than half dropped
    raises BootstrapError.
    """
    records = list(data)
    if n_boot < 1:
        raise ValueError(f"n_boot must be >= 1, got {n_boot}")
    doses = np.array([rec.dose for rec in records])
    grid = np.unique(doses) if grid is None else np.asarray(grid, dtype=float)
    fit_kwargs = dict(
        em_controls=em_controls, newton_controls=newton_controls, level=level
    )
    theta_full_rep, alpha_full_rep, emfit = fit_by_method(records, method, **fit_kwargs)
    point = success_prob(grid, theta_full_rep.theta)
    warm = dict(fit_kwargs)
    warm["theta_init"] = theta_full_rep.theta
    if alpha_full_rep is not None:
        warm["alpha_init"] = alpha_full_rep.alpha
    arm_indices = [np.flatnonzero(doses == level_) for level_ in np.unique(doses)]
    jobs = (
        delayed(_one_resample)(records, arm_indices, method, (seed, b), warm)
        for b in range(n_boot)
    )
    if parallelism and parallelism > 1:
        thetas = Parallel(n_jobs=parallelism)(jobs)
    else:
        thetas = [
            _one_resample(records, arm_indices, method, (seed, b), warm)
            for b in range(n_boot)
        ]
    kept = [t for t in thetas if t is not None]
    n_dropped = n_boot - len(kept)
    if n_dropped > 0.5 * n_boot:
        raise BootstrapError(
            f"{method} bootstrap: {n_dropped}/{n_boot} resamples failed to converge"
        )
    curves = np.array([success_prob(grid, t) for t in kept])
    lo = (1.0 - level) / 2.0
    lower = np.quantile(curves, lo, axis=0)
    upper = np.quantile(curves, 1.0 - lo, axis=0)
    points = tuple(
        CurvePoint(float(d), float(p), float(l), float(u))
        for d, p, l, u in zip(grid, point, lower, upper)
    )
    return BootstrapCurve(
        method=method, level=level, n_boot=n_boot, n_dropped=n_dropped, points=points
    )
