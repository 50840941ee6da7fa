"""Copas' selection-adjusted conditional likelihood and sensitivity grid.

Selection model: a study is published when
``alpha + beta / S_i + delta_i > 0`` with ``corr(delta_i, eps_i) = rho``.
For fixed (alpha, beta) the conditional likelihood of the published effects
is maximised over (theta, tau^2, rho); a grid over (alpha, beta) gives the
sensitivity analysis and a likelihood-ratio test on a funnel-asymmetry slope
picks the adjusted estimate.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from . import _kernels as K
from .errors import EstimationError, InvalidArgumentError, LRTError
from .model_core import (
    FTOL,
    MAXITER,
    RESTARTS,
    XTOL,
    MetaSample,
    _check_finite,
    fixed_effect,
    start_values,
)

LRT_THRESHOLD = 0.1
Z_975 = float(norm.ppf(0.975))


@dataclass(frozen=True)
class SelectionParams:
    """Fixed (alpha, beta) of the selection index.

    ``p_small``/``p_large`` are the publication probabilities at the largest
    and smallest standard error when the point was built from a probability
    grid; they are informational and ``None`` for hand-made points.
    """

    alpha: float
    beta: float
    p_small: Optional[float] = None
    p_large: Optional[float] = None

    def __post_init__(self):
        _check_finite(alpha=self.alpha, beta=self.beta)
        if self.beta < 0:
            raise InvalidArgumentError(f"beta must be nonnegative, got {self.beta!r}")


@dataclass(frozen=True)
class CopasFit:
    theta_hat: float
    tau2_hat: float
    rho_hat: float
    se_theta: float
    log_lik: float
    converged: bool
    params: SelectionParams
    se_method: str = "information"  # or "theta_curvature" when the 3x3 information is singular
    n_iter: int = 0

    def ci(self, level_z: float = Z_975) -> tuple[float, float]:
        half = level_z * self.se_theta
        return self.theta_hat - half, self.theta_hat + half


@dataclass(frozen=True)
class GridPoint:
    params: SelectionParams
    fit: Optional[CopasFit]
    lrt_p: float
    pub_prob_smallest: float
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.fit is not None and self.error is None and math.isfinite(self.lrt_p)


@dataclass
class GridResult:
    points: list
    chosen: Optional[int] = None
    threshold: float = LRT_THRESHOLD
    degenerate: bool = False

    @property
    def chosen_point(self) -> Optional[GridPoint]:
        return None if self.chosen is None else self.points[self.chosen]


def _check_z(z):
    if not math.isfinite(z):
        raise InvalidArgumentError(f"z must be finite, got {z!r}")


def inverse_mills(z: float) -> float:
    """phi(z) / Phi(z), stable for very negative z; returns 0.0 once phi(z) underflows."""
    _check_z(z)
    return float(K.inv_mills(float(z)))


def shrinkage_c(z: float) -> float:
    """``lambda(z) * (z + lambda(z))``, the variance reduction of a normal truncated below at -z."""
    _check_z(z)
    return float(K.shrink_c(float(z)))


def log_norm_cdf(z: float) -> float:
    _check_z(z)
    return float(K.log_ndtr(float(z)))


def _check_rho(rho):
    if not math.isfinite(rho) or abs(rho) >= 1:
        raise InvalidArgumentError(f"rho must lie in (-1, 1), got {rho!r}")


def sigma2_from_se(se: float, rho: float, params: SelectionParams) -> float:
    """Within-study variance implied by the reported SE under selection: S^2 / (1 - c^2 rho^2)."""
    _check_finite(se=se)
    if se <= 0:
        raise InvalidArgumentError(f"se must be positive, got {se!r}")
    _check_rho(rho)
    c = K.shrink_c(params.alpha + params.beta / se)
    return se * se / (1.0 - c * c * rho * rho)


def _terms(params: SelectionParams, sample: MetaSample):
    return K.selection_terms(float(params.alpha), float(params.beta), sample.s)


def copas_log_likelihood(
    theta: float, tau2: float, rho: float, params: SelectionParams, sample: MetaSample, gamma: float = 0.0
) -> float:
    """Conditional log-likelihood of the published effects.

    ``gamma`` adds a ``gamma / S_i`` trend to the mean (the funnel-asymmetry
    alternative used by :func:`selection_bias_lrt`); constants are dropped as in
    :func:`re_log_likelihood`.
    """
    _check_finite(theta=theta, tau2=tau2, gamma=gamma)
    if tau2 < 0:
        raise InvalidArgumentError(f"tau2 must be nonnegative, got {tau2!r}")
    _check_rho(rho)
    u, lpu, c = _terms(params, sample)
    return float(K.copas_loglik(float(theta), float(tau2), float(rho), float(gamma), sample.d, sample.s, u, lpu, c))


def _hessian_steps(p):
    h = 1e-4 * (1.0 + np.abs(p))
    if p.shape[0] > 2:
        # keep rho +- h inside the open interval
        room = 1.0 - abs(p[2])
        if h[2] >= room:
            h[2] = 0.5 * room
    return h


def _theta_se(p, mode, sample, u, lpu, c):
    """SE of theta from the inverse observed information, falling back to
    the curvature in theta alone when the information is not positive definite."""
    h = _hessian_steps(p)
    info = -K.loglik_hessian(p, h, mode, sample.d, sample.s, u, lpu, c)
    info = 0.5 * (info + info.T)
    if np.all(np.isfinite(info)):
        eig = np.linalg.eigvalsh(info)
        if eig[0] > 1e-8 * max(eig[-1], 1e-300):
            var = float(np.linalg.inv(info)[0, 0])
            if var > 0 and math.isfinite(var):
                return math.sqrt(var), "information"
    if info[0, 0] > 0 and math.isfinite(info[0, 0]):
        return 1.0 / math.sqrt(info[0, 0]), "theta_curvature"
    return math.nan, "failed"


def _fit(params, sample, mode, x0=None):
    d, s = sample.d, sample.s
    u, lpu, c = _terms(params, sample)
    theta0, _, y0 = start_values(sample)
    _, se_fe = fixed_effect(sample)
    med_s = float(np.median(s))
    if x0 is None:
        x0 = [theta0, y0, 0.0] + ([0.0] if mode == K.MODE_COPAS_GAMMA else [])
    x0 = np.asarray(x0, dtype=float)
    step = np.array([2.0 * se_fe, 1.0, 0.5, 2.0 * se_fe * med_s][: x0.shape[0]])
    x, _, it, conv, _ = K.minimize_with_restarts(x0, step, mode, d, s, u, lpu, c, FTOL, XTOL, MAXITER, RESTARTS)
    theta, tau2, rho, gamma = K.unpack(x, mode)
    ll = float(K.copas_loglik(theta, tau2, rho, gamma, d, s, u, lpu, c))
    return x, (theta, tau2, rho, gamma), ll, bool(conv), int(it), (u, lpu, c)


def fit_copas(params: SelectionParams, sample: MetaSample) -> CopasFit:
    """Maximise the conditional likelihood over (theta, tau^2, rho) at fixed (alpha, beta).

    tau^2 is searched on ``log(tau^2 + 1e-10)`` and rho on ``atanh(rho / 0.9999)``.
    The standard error of theta comes from a central-difference observed
    information in (theta, tau^2, rho).
    """
    if sample.m < 3:
        raise InvalidArgumentError(f"the Copas fit needs at least 3 studies, got {sample.m}")
    _, (theta, tau2, rho, _), ll, conv, it, (u, lpu, c) = _fit(params, sample, K.MODE_COPAS)
    p = np.array([theta, tau2, rho])
    se, how = _theta_se(p, K.MODE_COPAS, sample, u, lpu, c)
    if not math.isfinite(se):
        conv = False
    return CopasFit(float(theta), float(tau2), float(rho), se, ll, conv, params, how, it)


@dataclass(frozen=True)
class LRTResult:
    p_value: float
    statistic: float
    reduced: CopasFit
    full_log_lik: float
    gamma_hat: float


def _lrt(params: SelectionParams, sample: MetaSample, reduced: Optional[CopasFit] = None) -> LRTResult:
    if sample.m < 4:
        raise InvalidArgumentError(f"the selection-bias test needs at least 4 studies, got {sample.m}")
    if reduced is None:
        reduced = fit_copas(params, sample)
    x_red = [
        reduced.theta_hat,
        math.log(reduced.tau2_hat + K.TAU2_FLOOR),
        math.atanh(min(max(reduced.rho_hat / K.RHO_MAX, -1.0 + 1e-15), 1.0 - 1e-15)),
        0.0,
    ]
    _, (_, _, _, gamma), ll_full, conv_full, _, _ = _fit(params, sample, K.MODE_COPAS_GAMMA, x0=x_red)
    if not (reduced.converged and conv_full):
        raise LRTError(
            "likelihood-ratio fits did not converge "
            f"(reduced={reduced.converged}, full={conv_full})",
            full={"log_lik": ll_full, "gamma_hat": gamma, "converged": conv_full},
            reduced=reduced,
        )
    stat = max(0.0, 2.0 * (ll_full - reduced.log_lik))
    p = min(1.0, max(0.0, math.erfc(math.sqrt(0.5 * stat))))
    return LRTResult(p, stat, reduced, ll_full, float(gamma))


def selection_bias_lrt(params: SelectionParams, sample: MetaSample) -> float:
    """p-value of the likelihood-ratio test of gamma = 0 in the mean model
    ``theta + gamma / S_i`` under the conditional likelihood at (alpha, beta)."""
    return _lrt(params, sample).p_value


def _probit(p):
    return float(norm.ppf(p))


def _grid_probs(n, lo=0.01, hi=0.99):
    if n == 1:
        return np.array([hi])
    return np.linspace(lo, hi, n)


def build_grid(sample: MetaSample, n_alpha: int, n_beta: int) -> list:
    """(alpha, beta) grid laid out on publication probabilities.

    ``p_small`` (probability at the largest SE) runs over ``[0.01, 0.99]``
    in ``n_alpha`` steps, and for each of those ``p_large`` (at the smallest SE)
    runs over ``[p_small, 0.99]`` in ``n_beta`` steps; a single step sits at
    0.99. When all SEs coincide only ``n_alpha`` points with ``beta = 0``
    are returned and a warning is issued.
    """
    if n_alpha < 1 or n_beta < 1:
        raise InvalidArgumentError("grid dimensions must be at least 1")
    s_min = float(np.min(sample.s))
    s_max = float(np.max(sample.s))
    prec_lo, prec_hi = 1.0 / s_max, 1.0 / s_min
    grid = []
    if prec_hi - prec_lo <= 1e-12 * prec_hi:
        warnings.warn("all standard errors are equal; grid reduced to alpha-only variation", stacklevel=2)
        for p_small in _grid_probs(n_alpha):
            grid.append(SelectionParams(_probit(p_small), 0.0, float(p_small), float(p_small)))
        return grid
    for p_small in _grid_probs(n_alpha):
        z_small = _probit(p_small)
        for p_large in _grid_probs(n_beta, lo=p_small):
            beta = max(0.0, (_probit(p_large) - z_small) / (prec_hi - prec_lo))
            alpha = z_small - beta * prec_lo
            grid.append(SelectionParams(alpha, beta, float(p_small), float(p_large)))
    return grid


def is_degenerate_grid(grid: Sequence[SelectionParams]) -> bool:
    return all(p.beta == 0 for p in grid)


def _pub_prob_smallest(params: SelectionParams, sample: MetaSample) -> float:
    if params.p_small is not None:
        return params.p_small
    return float(K.norm_cdf(params.alpha + params.beta / float(np.max(sample.s))))


def evaluate_point(params: SelectionParams, sample: MetaSample) -> GridPoint:
    """Fit one grid point and its selection-bias test; failures are captured, not raised."""
    pub = _pub_prob_smallest(params, sample)
    fit = None
    try:
        fit = fit_copas(params, sample)
        lrt = _lrt(params, sample, reduced=fit)
        return GridPoint(params, fit, lrt.p_value, pub)
    except (EstimationError, InvalidArgumentError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return GridPoint(params, fit, math.nan, pub, error=f"{type(exc).__name__}: {exc}")


def choose_point(points: Sequence[GridPoint], threshold: float = LRT_THRESHOLD) -> Optional[int]:
    """Index of the adjusted estimate: the passing point (``lrt_p > threshold``)
    with the least selection, ties broken by larger p-value then grid order."""
    best = None
    best_key = None
    for i, pt in enumerate(points):
        if not pt.ok or not pt.fit.converged or not (pt.lrt_p > threshold):
            continue
        key = (pt.pub_prob_smallest, pt.lrt_p)
        if best is None or key > best_key:
            best, best_key = i, key
    return best


def grid_sensitivity(
    sample: MetaSample,
    grid: Sequence[SelectionParams],
    threshold: float = LRT_THRESHOLD,
    early_stop: bool = False,
) -> GridResult:
    """Fit every grid point and choose the adjusted estimate.

    With ``early_stop`` points are visited in decreasing order of publication
    probability at the largest SE and the search ends after the first level
    containing a passing point. The chosen point is the same as for the full
    sweep; unvisited points are reported with ``error='skipped'``.
    """
    grid = list(grid)
    if not grid:
        raise InvalidArgumentError("grid is empty")
    cache: dict = {}

    def run(params):
        key = (params.alpha, params.beta)
        if key not in cache:
            cache[key] = evaluate_point(params, sample)
        pt = cache[key]
        if pt.params is not params:
            pt = GridPoint(params, pt.fit, pt.lrt_p, _pub_prob_smallest(params, sample), pt.error)
        return pt

    if not early_stop:
        points = [run(p) for p in grid]
        return GridResult(points, choose_point(points, threshold), threshold, is_degenerate_grid(grid))

    pubs = [_pub_prob_smallest(p, sample) for p in grid]
    points: list = [None] * len(grid)
    for level in sorted(set(pubs), reverse=True):
        idx = [i for i, v in enumerate(pubs) if v == level]
        for i in idx:
            points[i] = run(grid[i])
        if any(points[i].ok and points[i].fit.converged and points[i].lrt_p > threshold for i in idx):
            break
    for i, p in enumerate(grid):
        if points[i] is None:
            points[i] = GridPoint(p, None, math.nan, pubs[i], error="skipped")
    return GridResult(points, choose_point(points, threshold), threshold, is_degenerate_grid(grid))


def fallback_point(result: GridResult) -> Optional[int]:
    """Least-selection converged point, used when no point passes the test."""
    best = None
    for i, pt in enumerate(result.points):
        if pt.fit is None or not pt.fit.converged or not math.isfinite(pt.fit.se_theta):
            continue
        if best is None or pt.pub_prob_smallest > result.points[best].pub_prob_smallest:
            best = i
    return best


GRID_CSV_COLUMNS = [
    "alpha", "beta", "p_small", "p_large", "theta_hat", "tau2_hat", "rho_hat",
    "se_theta", "log_lik", "lrt_p", "chosen",
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def grid_to_csv(result: GridResult, sample: Optional[MetaSample] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_CSV_COLUMNS)
    for i, pt in enumerate(result.points):
        p = pt.params
        p_large = p.p_large
        if p_large is None and sample is not None:
            p_large = float(K.norm_cdf(p.alpha + p.beta / float(np.min(sample.s))))
        f = pt.fit
        w.writerow(
            [
                _fmt(p.alpha), _fmt(p.beta), _fmt(pt.pub_prob_smallest), _fmt(p_large),
                _fmt(f.theta_hat if f else None), _fmt(f.tau2_hat if f else None),
                _fmt(f.rho_hat if f else None), _fmt(f.se_theta if f else None),
                _fmt(f.log_lik if f else None), _fmt(pt.lrt_p), _fmt(i == result.chosen),
            ]
        )
    return buf.getvalue()


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def grid_to_dict(result: GridResult) -> dict:
    points = []
    for pt in result.points:
        fit = None
        if pt.fit is not None:
            fit = {k: v for k, v in asdict(pt.fit).items() if k != "params"}
            fit = {k: (_json_float(v) if isinstance(v, float) else v) for k, v in fit.items()}
        points.append(
            {
                "params": {k: _json_float(v) for k, v in asdict(pt.params).items()},
                "fit": fit,
                "lrt_p": _json_float(pt.lrt_p),
                "pub_prob_smallest": _json_float(pt.pub_prob_smallest),
                "error": pt.error,
            }
        )
    return {
        "points": points,
        "chosen": result.chosen,
        "threshold": result.threshold,
        "degenerate": result.degenerate,
    }


def grid_to_json(result: GridResult) -> str:
    return json.dumps(grid_to_dict(result), indent=2)
