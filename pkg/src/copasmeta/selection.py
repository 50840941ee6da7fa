"""Generative publication-selection mechanisms and rate calibration.

Three mechanisms decide which simulated studies get published:

* ``CopasLatent``: ``alpha + beta / S_i + delta_i > 0`` with ``delta_i``
  correlated with the study's true residual;
* ``Significance``: one-sided significant studies always, the rest with
  probability ``1 - pi_pub``;
* ``StandardizedLatent``: ``a + b * D_i / S_i + delta_i > 0`` with
  independent ``delta_i``.

The latent intercepts and slopes are re-solved for every population from the
5 % and 95 % sample quantiles of the driving variable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from .errors import CalibrationInfeasibleError, DegenerateSpreadError, InvalidArgumentError
from .simulate import Population, ScenarioConfig, as_population, simulate_population
from .streams import stream

P_HIGH = 0.99
P0_RANGE = (0.001, 0.5)


def _check_direction(direction):
    if direction not in (1, -1):
        raise InvalidArgumentError(f"direction must be +1 or -1, got {direction!r}")


def _check_p0(p0):
    if not (math.isfinite(p0) and 0 < p0 <= 0.5):
        raise InvalidArgumentError(f"p0 must lie in (0, 0.5], got {p0!r}")


@dataclass(frozen=True)
class CopasLatent:
    rho_sel: float = 0.0
    p0: float = 0.5
    kind = "copas_latent"

    def __post_init__(self):
        if not (math.isfinite(self.rho_sel) and abs(self.rho_sel) <= 1):
            raise InvalidArgumentError(f"rho_sel must lie in [-1, 1], got {self.rho_sel!r}")
        _check_p0(self.p0)

    @property
    def free_param(self) -> float:
        return self.p0


@dataclass(frozen=True)
class Significance:
    alpha_sig: float = 0.05
    pi_pub: float = 0.0
    direction: int = 1
    kind = "significance"

    def __post_init__(self):
        if not 0 < self.alpha_sig < 1:
            raise InvalidArgumentError(f"alpha_sig must lie in (0, 1), got {self.alpha_sig!r}")
        if not (math.isfinite(self.pi_pub) and 0 <= self.pi_pub <= 1):
            raise InvalidArgumentError(f"pi_pub must lie in [0, 1], got {self.pi_pub!r}")
        _check_direction(self.direction)

    @property
    def free_param(self) -> float:
        return self.pi_pub


@dataclass(frozen=True)
class StandardizedLatent:
    p0: float = 0.5
    direction: int = 1
    kind = "standardized_latent"

    def __post_init__(self):
        _check_p0(self.p0)
        _check_direction(self.direction)

    @property
    def free_param(self) -> float:
        return self.p0


MechanismSpec = Union[CopasLatent, Significance, StandardizedLatent]
MECHANISM_KINDS = {cls.kind: cls for cls in (CopasLatent, Significance, StandardizedLatent)}


def mechanism_from_dict(data: dict) -> MechanismSpec:
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in MECHANISM_KINDS:
        raise InvalidArgumentError(f"mechanism kind must be one of {sorted(MECHANISM_KINDS)}, got {kind!r}")
    cls = MECHANISM_KINDS[kind]
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidArgumentError(f"bad {kind} parameters: {exc}") from None


def mechanism_to_dict(spec: MechanismSpec) -> dict:
    out = {"kind": spec.kind}
    out.update({k: getattr(spec, k) for k in spec.__dataclass_fields__})
    return out


@dataclass(frozen=True)
class LatentParams:
    intercept: float
    slope: float


@dataclass(frozen=True)
class SelectionOutcome:
    published: np.ndarray
    eliminated: np.ndarray
    latent: np.ndarray  # Z_i for latent kinds, the uniform draw for significance
    params: Optional[LatentParams] = None
    flat_fallback: bool = False

    @property
    def mask(self) -> np.ndarray:
        out = np.zeros(self.published.size + self.eliminated.size, dtype=bool)
        out[self.published] = True
        return out

    @property
    def rate(self) -> float:
        return self.published.size / (self.published.size + self.eliminated.size)

    def audit_csv(self, population) -> str:
        pop = as_population(population)
        mask = self.mask
        z = pop.standardized
        lines = ["study_index,d,s,d_over_s,latent_z_or_uniform,published"]
        for i in range(len(pop)):
            lines.append(
                f"{i},{pop.d[i]:.17g},{pop.s[i]:.17g},{z[i]:.17g},{self.latent[i]:.17g},{int(mask[i])}"
            )
        return "\n".join(lines) + "\n"


def _outcome(mask, latent, params=None, flat=False) -> SelectionOutcome:
    mask = np.asarray(mask, dtype=bool)
    return SelectionOutcome(
        np.flatnonzero(mask), np.flatnonzero(~mask), np.asarray(latent, dtype=float), params, flat
    )


def solve_latent_params(q5: float, q95: float, p0: float, p_high: float = P_HIGH) -> LatentParams:
    """Intercept and slope with ``Phi(intercept + slope*q5) = p0`` and
    ``Phi(intercept + slope*q95) = p_high``."""
    if not (math.isfinite(q5) and math.isfinite(q95)):
        raise InvalidArgumentError("quantiles must be finite")
    if not q95 > q5:
        raise DegenerateSpreadError(f"q95 ({q95!r}) must exceed q5 ({q5!r})")
    if not (0 < p0 <= p_high < 1):
        raise InvalidArgumentError(f"need 0 < p0 <= p_high < 1, got p0={p0!r}, p_high={p_high!r}")
    z_lo = float(norm.ppf(p0))
    z_hi = float(norm.ppf(p_high))
    slope = (z_hi - z_lo) / (q95 - q5)
    return LatentParams(z_lo - slope * q5, slope)


def _latent_params_for(values, p0, p_high=P_HIGH):
    q5, q95 = np.quantile(values, [0.05, 0.95])
    if q95 - q5 <= 1e-12 * max(abs(q95), abs(q5), 1.0):
        warnings.warn("degenerate quantile spread; using flat selection", stacklevel=3)
        return LatentParams(float(norm.ppf(p0)), 0.0), True
    return solve_latent_params(float(q5), float(q95), p0, p_high), False


def draw_delta_correlated(eps_i: float, se_true: float, rho_sel: float, rng: np.random.Generator) -> float:
    """Selection noise with ``corr(delta, eps / se_true) = rho_sel``."""
    if not se_true > 0:
        raise InvalidArgumentError(f"se_true must be positive, got {se_true!r}")
    if not abs(rho_sel) <= 1:
        raise InvalidArgumentError(f"rho_sel must lie in [-1, 1], got {rho_sel!r}")
    return rho_sel * eps_i / se_true + math.sqrt(1.0 - rho_sel * rho_sel) * rng.standard_normal()


def _deltas(pop: Population, rho_sel, rng):
    noise = rng.standard_normal(len(pop))
    return rho_sel * pop.eps_resid / pop.se_true + math.sqrt(1.0 - rho_sel * rho_sel) * noise


def apply_copas_selection(population, rho_sel: float, p0: float, rng: np.random.Generator,
                          p_high: float = P_HIGH) -> SelectionOutcome:
    pop = as_population(population)
    if len(pop) < 2:
        raise InvalidArgumentError("need at least 2 studies to form quantiles")
    if not abs(rho_sel) <= 1:
        raise InvalidArgumentError(f"rho_sel must lie in [-1, 1], got {rho_sel!r}")
    precision = 1.0 / pop.s
    params, flat = _latent_params_for(precision, p0, p_high)
    z = params.intercept + params.slope * precision + _deltas(pop, rho_sel, rng)
    return _outcome(z > 0, z, params, flat)


def significance_cutoff(alpha_sig: float) -> float:
    return float(norm.ppf(1.0 - alpha_sig))


def apply_significance_selection(population, alpha_sig: float, pi_pub: float, direction: int,
                                 rng: np.random.Generator) -> SelectionOutcome:
    pop = as_population(population)
    Significance(alpha_sig, pi_pub, direction)
    significant = direction * pop.standardized > significance_cutoff(alpha_sig)
    u = rng.uniform(size=len(pop))
    return _outcome(significant | (u <= 1.0 - pi_pub), u)


def apply_standardized_selection(population, p0: float, direction: int, rng: np.random.Generator,
                                 p_high: float = P_HIGH) -> SelectionOutcome:
    pop = as_population(population)
    if len(pop) < 2:
        raise InvalidArgumentError("need at least 2 studies to form quantiles")
    _check_direction(direction)
    t = direction * pop.standardized
    params, flat = _latent_params_for(t, p0, p_high)
    z = params.intercept + params.slope * t + rng.standard_normal(len(pop))
    return _outcome(z > 0, z, params, flat)


def apply_mechanism(spec: MechanismSpec, population, rng: np.random.Generator) -> SelectionOutcome:
    if isinstance(spec, CopasLatent):
        return apply_copas_selection(population, spec.rho_sel, spec.p0, rng)
    if isinstance(spec, Significance):
        return apply_significance_selection(population, spec.alpha_sig, spec.pi_pub, spec.direction, rng)
    if isinstance(spec, StandardizedLatent):
        return apply_standardized_selection(population, spec.p0, spec.direction, rng)
    raise InvalidArgumentError(f"unknown mechanism {spec!r}")


def publication_probabilities(spec: MechanismSpec, population) -> np.ndarray:
    """Per-study publication probability given the population (analytic)."""
    pop = as_population(population)
    if isinstance(spec, Significance):
        sig = spec.direction * pop.standardized > significance_cutoff(spec.alpha_sig)
        return np.where(sig, 1.0, 1.0 - spec.pi_pub)
    if isinstance(spec, StandardizedLatent):
        t = spec.direction * pop.standardized
        params, _ = _latent_params_for(t, spec.p0)
        return norm.cdf(params.intercept + params.slope * t)
    precision = 1.0 / pop.s
    params, _ = _latent_params_for(precision, spec.p0)
    mean = params.intercept + params.slope * precision + spec.rho_sel * pop.eps_resid / pop.se_true
    sd = math.sqrt(1.0 - spec.rho_sel**2)
    if sd == 0:
        return (mean > 0).astype(float)
    return norm.cdf(mean / sd)


@dataclass(frozen=True)
class Calibration:
    spec: MechanismSpec
    achieved_rate: float
    iterations: int
    achievable: tuple


def calibrate_on_pilots(
    spec: MechanismSpec,
    populations: Sequence[Population],
    rng_factory: Callable[[int], np.random.Generator],
    target: float = 0.70,
    tol: float = 0.01,
    max_iter: int = 60,
) -> Calibration:
    """Tune the free parameter of ``spec`` (``p0`` or ``pi_pub``) so the mean
    published fraction over the pilot ``populations`` is within ``tol`` of
    ``target``.

    ``rng_factory(i)`` must return a fresh generator for pilot ``i``; the same
    draws are replayed for every trial value, so the pilot rate is a monotone
    step function of the parameter and bisection is well defined. Bisection
    keeps going until the rate is within ``tol / 10`` (or the bracket is
    below 1e-7) and the result is accepted only within ``tol``.
    """
    if not 0 < target <= 1:
        raise InvalidArgumentError(f"target must lie in (0, 1], got {target!r}")
    if not populations:
        raise InvalidArgumentError("calibration needs at least one pilot population")

    def rate(value):
        trial = _with_free_param(spec, value)
        fracs = [apply_mechanism(trial, pop, rng_factory(i)).rate for i, pop in enumerate(populations)]
        return math.fsum(fracs) / len(fracs)

    if isinstance(spec, Significance):
        lo, hi = 1.0, 0.0  # pi_pub: rate decreases as pi_pub grows
    else:
        lo, hi = P0_RANGE
    r_lo, r_hi = rate(lo), rate(hi)
    achievable = (min(r_lo, r_hi), max(r_lo, r_hi))
    if target < achievable[0] - tol or target > achievable[1] + tol:
        raise CalibrationInfeasibleError(
            f"target publication rate {target} outside achievable range "
            f"[{achievable[0]:.4f}, {achievable[1]:.4f}] for {spec.kind}",
            achievable=achievable,
        )
    best_val, best_rate = (lo, r_lo) if abs(r_lo - target) <= abs(r_hi - target) else (hi, r_hi)
    it = 0
    a, b = lo, hi  # rate(a) <= rate(b)
    while it < max_iter and abs(best_rate - target) > tol / 10 and abs(b - a) > 1e-7:
        mid = 0.5 * (a + b)
        r = rate(mid)
        it += 1
        if abs(r - target) < abs(best_rate - target):
            best_val, best_rate = mid, r
        if r < target:
            a = mid
        else:
            b = mid
    if abs(best_rate - target) > tol:
        raise CalibrationInfeasibleError(
            f"could not reach rate {target} +- {tol} for {spec.kind} (best {best_rate:.4f})",
            achievable=achievable,
        )
    return Calibration(_with_free_param(spec, best_val), best_rate, it, achievable)


def _with_free_param(spec, value):
    if isinstance(spec, Significance):
        return replace(spec, pi_pub=float(value))
    return replace(spec, p0=float(value))


def pilot_populations(scenario: ScenarioConfig, pilot_replicates: int = 200) -> list:
    """Pilot populations used for calibration, on streams disjoint from the main run."""
    key = scenario.to_dict()
    key.pop("seed")
    return [
        simulate_population(scenario, stream(scenario.seed, key, i, "pilot-population"))
        for i in range(pilot_replicates)
    ]


def calibrate_rate(
    spec: MechanismSpec,
    scenario: ScenarioConfig,
    target: float = 0.70,
    tol: float = 0.01,
    pilot_replicates: int = 200,
    populations: Optional[Sequence[Population]] = None,
) -> Calibration:
    """Calibrate ``spec`` for ``scenario`` on ``pilot_replicates`` simulated pilots.

    Pass ``populations`` (from :func:`pilot_populations`) to share pilots
    between several mechanisms of one scenario.
    """
    if pilot_replicates < 1:
        raise InvalidArgumentError("pilot_replicates must be at least 1")
    if populations is None:
        populations = pilot_populations(scenario, pilot_replicates)
    key = scenario.to_dict()
    key.pop("seed")
    tag = mechanism_to_dict(spec)
    tag.pop("pi_pub", None)
    tag.pop("p0", None)

    def factory(i):
        return stream(scenario.seed, key, i, ["pilot-selection", tag])

    return calibrate_on_pilots(spec, populations, factory, target, tol)
