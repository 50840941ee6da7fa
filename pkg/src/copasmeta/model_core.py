"""Aggregated study data and the unadjusted random-effects ML fit."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K
from .errors import DataError, InvalidArgumentError

# simplex settings shared by every likelihood fit in the package
FTOL = 1e-10
XTOL = 1e-8
MAXITER = 2000
RESTARTS = 3


def _check_finite(**values):
    for name, value in values.items():
        if not math.isfinite(value):
            raise InvalidArgumentError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class AggregatedStudy:
    """One published study: effect size and its standard error."""

    effect: float
    se: float

    def __post_init__(self):
        _check_finite(effect=self.effect, se=self.se)
        if self.se <= 0:
            raise InvalidArgumentError(f"se must be positive, got {self.se!r}")

    @property
    def precision(self) -> float:
        return 1.0 / self.se

    @property
    def standardized(self) -> float:
        return self.effect / self.se


class MetaSample:
    """Ordered, immutable collection of :class:`AggregatedStudy`.

    The effects and standard errors are also held as read-only float arrays
    (``d`` and ``s``) because every estimator works on them vectorised.
    """

    __slots__ = ("studies", "d", "s")

    def __init__(self, studies: Iterable[AggregatedStudy]):
        studies = tuple(studies)
        if not studies:
            raise InvalidArgumentError("a meta-analysis needs at least one study")
        for st in studies:
            if not isinstance(st, AggregatedStudy):
                raise InvalidArgumentError(f"expected AggregatedStudy, got {type(st).__name__}")
        d = np.array([st.effect for st in studies], dtype=float)
        s = np.array([st.se for st in studies], dtype=float)
        d.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "studies", studies)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "s", s)

    def __setattr__(self, name, value):
        raise AttributeError("MetaSample is immutable")

    @classmethod
    def from_arrays(cls, effects: Sequence[float], ses: Sequence[float]) -> "MetaSample":
        effects = np.asarray(effects, dtype=float).ravel()
        ses = np.asarray(ses, dtype=float).ravel()
        if effects.shape != ses.shape:
            raise InvalidArgumentError("effects and ses differ in length")
        return cls(AggregatedStudy(float(e), float(v)) for e, v in zip(effects, ses))

    @property
    def m(self) -> int:
        return len(self.studies)

    def __len__(self):
        return len(self.studies)

    def __iter__(self):
        return iter(self.studies)

    def __getitem__(self, idx):
        return self.studies[idx]

    def __repr__(self):
        return f"MetaSample(m={self.m})"


@dataclass(frozen=True)
class ReFit:
    theta_hat: float
    tau2_hat: float
    se_theta: float
    log_lik: float
    converged: bool


def re_log_likelihood(theta: float, tau2: float, sample: MetaSample) -> float:
    """Marginal normal random-effects log-likelihood, additive constants dropped.

    ``sum(-0.5*log(tau2 + S_i^2) - (D_i - theta)^2 / (2*(tau2 + S_i^2)))``
    """
    _check_finite(theta=theta, tau2=tau2)
    if tau2 < 0:
        raise InvalidArgumentError(f"tau2 must be nonnegative, got {tau2!r}")
    return float(K.re_loglik(float(theta), float(tau2), sample.d, sample.s))


def fixed_effect(sample: MetaSample) -> tuple[float, float]:
    """Inverse-variance fixed-effect estimate and its standard error."""
    w = 1.0 / sample.s**2
    est = float(np.sum(w * sample.d) / np.sum(w))
    return est, float(1.0 / math.sqrt(np.sum(w)))


def dersimonian_laird(sample: MetaSample) -> float:
    """Moment estimate of tau^2, clamped at zero."""
    if sample.m < 2:
        return 0.0
    w = 1.0 / sample.s**2
    est, _ = fixed_effect(sample)
    q = float(np.sum(w * (sample.d - est) ** 2))
    denom = float(np.sum(w) - np.sum(w**2) / np.sum(w))
    if denom <= 0:
        return 0.0
    return max(0.0, (q - (sample.m - 1)) / denom)


def start_values(sample: MetaSample) -> tuple[float, float, float]:
    """(theta0, tau2_0, log-scale start) shared by the RE and Copas fits.

    The log-scale coordinate is started at least 1 % of the median squared
    standard error above the floor so the simplex does not begin on the flat
    part of the likelihood where tau2 is numerically zero.
    """
    theta0, _ = fixed_effect(sample)
    tau2_0 = dersimonian_laird(sample)
    y0 = math.log(max(tau2_0, 0.01 * float(np.median(sample.s**2))) + K.TAU2_FLOOR)
    return theta0, tau2_0, y0


def fit_random_effects(sample: MetaSample) -> ReFit:
    """Maximum-likelihood fit of (theta, tau^2) in the random-effects model."""
    theta0, _, y0 = start_values(sample)
    _, se_fe = fixed_effect(sample)
    d, s = sample.d, sample.s
    empty = np.zeros(0)
    if sample.m == 1:
        ll = float(K.re_loglik(theta0, 0.0, d, s))
        return ReFit(theta0, 0.0, float(s[0]), ll, True)
    x0 = np.array([theta0, y0])
    step = np.array([2.0 * se_fe, 1.0])
    x, _, _, conv, _ = K.minimize_with_restarts(
        x0, step, K.MODE_RE, d, s, empty, empty, empty, FTOL, XTOL, MAXITER, RESTARTS
    )
    theta, tau2, _, _ = K.unpack(x, K.MODE_RE)
    se = 1.0 / math.sqrt(float(np.sum(1.0 / (tau2 + s**2))))
    ll = float(K.re_loglik(theta, tau2, d, s))
    return ReFit(float(theta), float(tau2), se, ll, bool(conv))


def read_studies_csv(path) -> MetaSample:
    """Read ``study_id,effect,se`` rows.

    Raises :class:`DataError` naming the offending file line for missing
    columns, unparsable numbers, non-finite values or ``se <= 0``.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    studies = []
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", line=1) from None
        header = [h.strip().lstrip("﻿") for h in header]
        if header != ["study_id", "effect", "se"]:
            raise DataError(f"expected header 'study_id,effect,se', got {','.join(header)!r}", line=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise DataError(f"expected 3 fields, got {len(row)}", line=line)
            try:
                effect = float(row[1])
                se = float(row[2])
            except ValueError:
                raise DataError(f"non-numeric effect or se: {row[1]!r}, {row[2]!r}", line=line) from None
            if not (math.isfinite(effect) and math.isfinite(se)):
                raise DataError("effect and se must be finite", line=line)
            if se <= 0:
                raise DataError(f"se must be positive, got {row[2].strip()}", line=line)
            studies.append(AggregatedStudy(effect, se))
    if not studies:
        raise DataError("no data rows")
    return MetaSample(studies)
