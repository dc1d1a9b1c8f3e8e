"""Complete-case and non-responder-imputation baselines.

Both discard the missingness model entirely and reuse the Emax Newton
engine on unit-weight rows; the ``firth`` flag lets bias comparisons
separate the missing-data handling from the penalization (off by default).
"""

from __future__ import annotations

from dataclasses import replace

from .em_engine import expand_dataset
from .emax_fit import fit_emax
from .exceptions import DoseLevelsError

__all__ = ["fit_cc", "fit_nri"]


def fit_cc(data, firth=False, controls=None, level=0.95, init=None):
    """Complete-case fit: drop every record with a missing outcome."""
    kept = [rec for rec in data if not rec.missing]
    if not kept:
        raise DoseLevelsError("complete-case fit has no observed outcomes left")
    try:
        pseudo = expand_dataset(kept)
        return fit_emax(
            pseudo, firth=firth, init=init, controls=controls, level=level, method="CC"
        )
    except DoseLevelsError as exc:
        raise DoseLevelsError(f"complete-case fit: {exc}") from None


def fit_nri(data, firth=False, controls=None, level=0.95, init=None):
    """Non-responder imputation: set every missing outcome to failure (0)."""
    filled = [replace(rec, outcome=0) if rec.missing else rec for rec in data]
    pseudo = expand_dataset(filled)
    return fit_emax(
        pseudo, firth=firth, init=init, controls=controls, level=level, method="NRI"
    )
