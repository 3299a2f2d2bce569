"""Right-censored survival data: container, CSV ingestion and standardization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Invalid input data. ``row`` is the 1-based data row (header excluded)."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SurvivalDataset:
    """Observed times, event indicators and time-invariant covariates.

    Parameters
    ----------
    time : array_like, shape (n,)
        Observed times ``min(T, C)``; strictly positive and finite.
    status : array_like, shape (n,)
        1 if the failure was observed, 0 if censored.
    covariates : array_like, shape (n, p)
    names : sequence of str, optional
        Covariate labels; defaults to ``z1, ..., zp``.
    """

    time: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float).ravel()
        status = np.asarray(self.status, dtype=float).ravel()
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        n = time.shape[0]
        if status.shape[0] != n or cov.shape[0] != n:
            raise DataError("time, status and covariates must have the same length")
        p = cov.shape[1]
        if p < 1:
            raise DataError("at least one covariate is required")
        bad = ~np.isfinite(time) | (time <= 0)
        if bad.any():
            raise DataError("time must be positive and finite", row=int(np.argmax(bad)) + 1)
        bad = (status != 0) & (status != 1)
        if bad.any():
            raise DataError("status must be 0 or 1", row=int(np.argmax(bad)) + 1)
        bad = ~np.isfinite(cov).all(axis=1)
        if bad.any():
            raise DataError("covariates must be finite", row=int(np.argmax(bad)) + 1)
        if status.sum() == 0:
            raise DataError("no events: at least one status must be 1")
        if n < p + 2:
            raise DataError(f"need at least p + 2 = {p + 2} subjects, got {n}")
        names = tuple(self.names) if self.names else tuple(f"z{k + 1}" for k in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} names given for {p} covariates")
        object.__setattr__(self, "time", _frozen(time))
        object.__setattr__(self, "status", _frozen(status))
        object.__setattr__(self, "covariates", _frozen(cov))
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def log_time(self) -> np.ndarray:
        return np.log(self.time)

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    def binary_columns(self) -> list[str]:
        """Names of covariates taking exactly two distinct values."""
        return [
            name
            for name, col in zip(self.names, self.covariates.T)
            if np.unique(col).size == 2
        ]

    def summary(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "events": self.n_events,
            "censoring_fraction": 1.0 - self.n_events / self.n,
            "covariates": list(self.names),
            "binary_covariates": self.binary_columns(),
        }

    def summary_json(self, **kwargs) -> str:
        return json.dumps(self.summary(), **kwargs)

    def with_covariates(self, covariates, names: Sequence[str] | None = None) -> "SurvivalDataset":
        return SurvivalDataset(self.time, self.status, covariates,
                               tuple(names) if names is not None else self.names)

    def with_time(self, time) -> "SurvivalDataset":
        return SurvivalDataset(time, self.status, self.covariates, self.names)

    def subset(self, index) -> "SurvivalDataset":
        index = np.asarray(index)
        return SurvivalDataset(self.time[index], self.status[index],
                               self.covariates[index], self.names)


def load_csv(path, time_col: str, status_col: str,
             covariate_cols: Sequence[str]) -> SurvivalDataset:
    """Read a comma-separated UTF-8 file with a header row.

    Row order is preserved. Errors name the offending 1-based data row.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        wanted = [time_col, status_col, *covariate_cols]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"missing column(s): {', '.join(missing)}")
        idx = [header.index(c) for c in wanted]
        rows = []
        for rownum, rec in enumerate(reader, start=1):
            if not rec or all(not cell.strip() for cell in rec):
                continue
            if len(rec) < len(header):
                raise DataError(f"expected {len(header)} fields, got {len(rec)}", row=rownum)
            values = []
            for col, k in zip(wanted, idx):
                cell = rec[k].strip()
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"non-numeric value {cell!r} in column {col!r}",
                                    row=rownum) from None
            t, s = values[0], values[1]
            if not (math.isfinite(t) and t > 0):
                raise DataError(f"time must be positive and finite, got {t!r}", row=rownum)
            if s not in (0.0, 1.0):
                raise DataError(f"status must be 0 or 1, got {s!r}", row=rownum)
            rows.append(values)
    if not rows:
        raise DataError(f"{path} has no data rows")
    arr = np.array(rows, dtype=float)
    return SurvivalDataset(arr[:, 0], arr[:, 1], arr[:, 2:], tuple(covariate_cols))


def save_csv(data: SurvivalDataset, path, time_col: str = "time",
             status_col: str = "status") -> None:
    """Write ``data`` so that :func:`load_csv` recovers it exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([time_col, status_col, *data.names])
        for t, s, z in zip(data.time, data.status, data.covariates):
            writer.writerow([repr(float(t)), int(s), *(repr(float(v)) for v in z)])


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-covariate centre and scale. Exempted columns carry mean 0, sd 1."""

    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray

    def apply(self, covariates: np.ndarray) -> np.ndarray:
        return (np.asarray(covariates, dtype=float) - self.mean) / self.sd

    def invert(self, covariates: np.ndarray) -> np.ndarray:
        return np.asarray(covariates, dtype=float) * self.sd + self.mean

    def coefficients_to_original(self, beta) -> np.ndarray:
        """Map a coefficient vector fitted on the standardized scale back.

        The intercept-free AFT fit absorbs the centring, so only the scale
        changes: ``beta_orig = beta_std / sd``.
        """
        return np.asarray(beta, dtype=float) / self.sd

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "sd": self.sd.tolist()}


def standardize(data: SurvivalDataset, exempt_binary: bool = False
                ) -> tuple[SurvivalDataset, StandardizationRecord]:
    """Centre each covariate to sample mean 0 and scale to sample sd 1 (ddof=1).

    With ``exempt_binary`` the two-valued columns are left untouched.
    """
    z = data.covariates
    mean = z.mean(axis=0)
    sd = z.std(axis=0, ddof=1)
    for name, s in zip(data.names, sd):
        if not s > 0:
            raise DataError(f"covariate {name!r} has zero variance")
    if exempt_binary:
        binary = set(data.binary_columns())
        for k, name in enumerate(data.names):
            if name in binary:
                mean[k], sd[k] = 0.0, 1.0
    rec = StandardizationRecord(data.names, _frozen(mean), _frozen(sd))
    return data.with_covariates(rec.apply(z)), rec
