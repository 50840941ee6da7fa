"""Individual-participant-data population generator.

Each study has an overdispersed Poisson size split binomially into two arms,
responses ``Y = mu + beta_j + U_ij + eps`` with a bivariate normal pair of
arm random effects, and is reduced to a mean difference with a
Welch-type standard error. The true residual difference is kept for the
correlated selection mechanism.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateStudyError, InvalidArgumentError
from .model_core import MetaSample

ORIENTATIONS = ("group1_minus_group0", "group0_minus_group1")
MAX_REDRAWS = 1000


@dataclass(frozen=True)
class ScenarioConfig:
    """Generative settings for one simulated meta-analysis design.

    Defaults are a homogeneous blood-pressure-scale design (mu 160, zeta2 100)
    with m = 30.
    ``lambda_`` is serialised as ``lambda``. The gamma draw uses shape
    ``a0`` and *rate* ``b0``.
    """

    m: int = 30
    lambda_: float = 100.0
    a0: float = 1.0
    b0: float = 1.0
    p: float = 0.5
    mu: float = 160.0
    theta: float = -0.5
    zeta2: float = 100.0
    sigma0_2: float = 0.0
    sigma1_2: float = 0.0
    rho01: float = 0.0
    seed: int = 20240101
    orientation: str = "group1_minus_group0"

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ConfigurationError(f"m must be a positive integer, got {self.m!r}")
        for name in ("lambda_", "a0", "b0", "zeta2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigurationError(f"{name.rstrip('_')} must be positive, got {v!r}")
        if not 0 < self.p < 1:
            raise ConfigurationError(f"p must lie in (0, 1), got {self.p!r}")
        for name in ("sigma0_2", "sigma1_2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be nonnegative, got {v!r}")
        if not (math.isfinite(self.rho01) and abs(self.rho01) <= 1):
            raise ConfigurationError(f"rho01 must lie in [-1, 1], got {self.rho01!r}")
        if not (math.isfinite(self.mu) and math.isfinite(self.theta)):
            raise ConfigurationError("mu and theta must be finite")
        if self.orientation not in ORIENTATIONS:
            raise ConfigurationError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @property
    def sign(self) -> int:
        return 1 if self.orientation == "group1_minus_group0" else -1

    @property
    def tau2(self) -> float:
        """Between-study variance of the arm difference."""
        cov = self.rho01 * math.sqrt(self.sigma0_2 * self.sigma1_2)
        return self.sigma0_2 - 2.0 * cov + self.sigma1_2

    @property
    def theta_true(self) -> float:
        """Generative mean of the reported effect, orientation resolved."""
        return self.sign * self.theta

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        allowed = {f.name for f in fields(cls)} - {"lambda_"} | {"lambda"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        data = dict(data)
        if "lambda" in data:
            data["lambda_"] = data.pop("lambda")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read scenario {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("scenario JSON must be an object")
        return cls.from_dict(data)

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class PopulationStudy:
    n0: int
    n1: int
    d: float
    s: float
    eps_resid: float
    se_true: float

    @property
    def standardized(self) -> float:
        return self.d / self.s


class Population:
    """Column-oriented population of simulated studies.

    Indexing and iteration yield :class:`PopulationStudy` records; the
    mechanisms and the harness use the arrays directly.
    """

    def __init__(self, n0, n1, d, s, eps_resid, se_true, tau2=0.0, redraws=0):
        self.n0 = np.asarray(n0, dtype=np.int64)
        self.n1 = np.asarray(n1, dtype=np.int64)
        self.d = np.asarray(d, dtype=float)
        self.s = np.asarray(s, dtype=float)
        self.eps_resid = np.asarray(eps_resid, dtype=float)
        self.se_true = np.asarray(se_true, dtype=float)
        self.tau2 = float(tau2)
        self.redraws = int(redraws)
        if np.any(self.s <= 0):
            raise InvalidArgumentError("population standard errors must be positive")

    @property
    def standardized(self) -> np.ndarray:
        return self.d / self.s

    def __len__(self):
        return self.d.shape[0]

    def __getitem__(self, i) -> PopulationStudy:
        return PopulationStudy(
            int(self.n0[i]), int(self.n1[i]), float(self.d[i]), float(self.s[i]),
            float(self.eps_resid[i]), float(self.se_true[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> MetaSample:
        idx = np.asarray(idx, dtype=np.int64)
        return MetaSample.from_arrays(self.d[idx], self.s[idx])

    @classmethod
    def from_studies(cls, studies) -> "Population":
        studies = list(studies)
        return cls(
            [st.n0 for st in studies], [st.n1 for st in studies], [st.d for st in studies],
            [st.s for st in studies], [st.eps_resid for st in studies], [st.se_true for st in studies],
        )

    def to_csv(self) -> str:
        lines = ["study_index,n0,n1,d,s,standardized,eps_resid,se_true"]
        z = self.standardized
        for i in range(len(self)):
            lines.append(
                f"{i},{self.n0[i]},{self.n1[i]},{self.d[i]:.17g},{self.s[i]:.17g},"
                f"{z[i]:.17g},{self.eps_resid[i]:.17g},{self.se_true[i]:.17g}"
            )
        return "\n".join(lines) + "\n"


def as_population(population) -> Population:
    if isinstance(population, Population):
        return population
    return Population.from_studies(population)


def _draw_one_size(config, rng):
    """Return (n0, n1, redraws) for one study; redraw until both arms have >= 2."""
    for attempt in range(MAX_REDRAWS):
        g = rng.gamma(config.a0, 1.0 / config.b0)
        n = rng.poisson(config.lambda_ * math.exp(0.5 * g))
        n0 = rng.binomial(n, config.p)
        n1 = n - n0
        if n0 >= 2 and n1 >= 2:
            return int(n0), int(n1), attempt
    raise ConfigurationError(
        f"{MAX_REDRAWS} consecutive redraws left an arm with fewer than 2 participants; lambda is too small"
    )


def draw_sample_sizes(config: ScenarioConfig, rng: np.random.Generator) -> tuple[list, int]:
    """Arm sizes for ``config.m`` studies and the total number of redraws."""
    sizes = []
    redraws = 0
    for _ in range(config.m):
        n0, n1, r = _draw_one_size(config, rng)
        sizes.append((n0, n1))
        redraws += r
    return sizes, redraws


def draw_random_effects(config: ScenarioConfig, rng: np.random.Generator) -> tuple[float, float]:
    """One (U0, U1) pair via the lower Cholesky factor of the 2x2 covariance."""
    if not abs(config.rho01) <= 1:
        raise InvalidArgumentError(f"rho01 must lie in [-1, 1], got {config.rho01!r}")
    z0, z1 = rng.standard_normal(2)
    sd0 = math.sqrt(config.sigma0_2)
    sd1 = math.sqrt(config.sigma1_2)
    if sd0 == 0.0 or sd1 == 0.0:
        return sd0 * z0, sd1 * z1
    r = config.rho01
    return sd0 * z0, sd1 * (r * z0 + math.sqrt(max(0.0, 1.0 - r * r)) * z1)


def simulate_study(config: ScenarioConfig, n0: int, n1: int, u0: float, u1: float,
                   rng: np.random.Generator) -> PopulationStudy:
    if n0 < 2 or n1 < 2:
        raise InvalidArgumentError("both arms need at least 2 participants")
    zeta = math.sqrt(config.zeta2)
    e0 = rng.normal(0.0, zeta, n0)
    e1 = rng.normal(0.0, zeta, n1)
    # Y_0k = mu + U0 + e, Y_1k = mu + theta + U1 + e
    y0 = config.mu + u0 + e0
    y1 = config.mu + config.theta + u1 + e1
    var0 = float(np.var(y0, ddof=1))
    var1 = float(np.var(y1, ddof=1))
    if var0 == 0.0 and var1 == 0.0:
        raise DegenerateStudyError("both arms have zero sample variance")
    sign = config.sign
    d = sign * (float(np.mean(y1)) - float(np.mean(y0)))
    s = math.sqrt(var0 / n0 + var1 / n1)
    eps_resid = sign * (float(np.mean(e1)) - float(np.mean(e0)))
    se_true = math.sqrt(config.zeta2 * (1.0 / n0 + 1.0 / n1))
    # d decomposes exactly into theta_true + U + eps_resid
    expected = sign * (config.theta + u1 - u0) + eps_resid
    assert abs(d - expected) <= 1e-9 * (1.0 + abs(config.mu)), "aggregation identity violated"
    return PopulationStudy(n0, n1, d, s, eps_resid, se_true)


def simulate_population(config: ScenarioConfig, rng: np.random.Generator) -> Population:
    """Draw ``config.m`` studies: all sizes first, then all random effects,
    then the individual responses study by study."""
    sizes, redraws = draw_sample_sizes(config, rng)
    effects = [draw_random_effects(config, rng) for _ in range(config.m)]
    studies = [simulate_study(config, n0, n1, u0, u1, rng) for (n0, n1), (u0, u1) in zip(sizes, effects)]
    return Population(
        [st.n0 for st in studies], [st.n1 for st in studies], [st.d for st in studies],
        [st.s for st in studies], [st.eps_resid for st in studies], [st.se_true for st in studies],
        tau2=config.tau2, redraws=redraws,
    )
