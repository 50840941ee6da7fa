"""Monte-Carlo evaluation of the Copas adjusted estimate under the three
selection mechanisms: replicate runner, metrics, Table-1 cells and the
histogram data behind the selection figure."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .copas import (
    LRT_THRESHOLD,
    Z_975,
    build_grid,
    fallback_point,
    grid_sensitivity,
)
from .errors import EmptyReportError, InvalidArgumentError
from .selection import (
    Calibration,
    CopasLatent,
    MechanismSpec,
    Significance,
    StandardizedLatent,
    apply_mechanism,
    calibrate_rate,
    mechanism_to_dict,
    pilot_populations,
    significance_cutoff,
)
from .simulate import ScenarioConfig, simulate_population
from .streams import stream

log = logging.getLogger(__name__)

MAX_SELECTION_REDRAWS = 100
UNRELIABLE_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class GridOptions:
    n_alpha: int = 10
    n_beta: int = 10
    lrt_threshold: float = LRT_THRESHOLD
    early_stop: bool = True


@dataclass(frozen=True)
class ReplicateResult:
    theta_adj: float
    ci_low: float
    ci_high: float
    m_published: int
    converged: bool
    chosen_grid_point: Optional[int] = None
    failure_kind: Optional[str] = None
    fallback: bool = False
    selection_redraws: int = 0


@dataclass(frozen=True)
class ScenarioReport:
    mse: float
    bias: float
    cp: float
    m_bar: float
    n_replicates_used: int
    n_failed: int
    mc_se_bias: float
    mc_se_mse: float = 0.0
    n_fallback: int = 0
    n_selection_redraws: int = 0
    unreliable: bool = False


def scenario_key(scenario: ScenarioConfig) -> dict:
    key = scenario.to_dict()
    key.pop("seed")
    return key


def direction_for(scenario: ScenarioConfig) -> int:
    return -1 if scenario.theta_true < 0 else 1


def effective_mechanism(mech: MechanismSpec, scenario: ScenarioConfig) -> MechanismSpec:
    # The Copas mechanism has no direction of its own: orient the residual
    # correlation so selection favours effects on the side of the true effect.
    if isinstance(mech, CopasLatent) and direction_for(scenario) < 0:
        return replace(mech, rho_sel=-mech.rho_sel)
    return mech


def _mech_tag(mech: MechanismSpec):
    tag = mechanism_to_dict(mech)
    tag.pop("pi_pub", None)
    tag.pop("p0", None)
    return ["selection", tag]


def select_replicate(scenario: ScenarioConfig, mech: MechanismSpec, replicate_index: int):
    """Population and selection outcome of one replicate.

    A replicate whose selection publishes nothing is redrawn in full from a
    fresh sub-stream; the number of redraws is returned alongside.
    """
    key = scenario_key(scenario)
    eff = effective_mechanism(mech, scenario)
    for attempt in range(MAX_SELECTION_REDRAWS):
        pop = simulate_population(scenario, stream(scenario.seed, key, replicate_index, "population", attempt))
        out = apply_mechanism(eff, pop, stream(scenario.seed, key, replicate_index, _mech_tag(mech), attempt))
        if out.published.size > 0:
            return pop, out, attempt
    raise RuntimeError(f"replicate {replicate_index}: selection published nothing in {MAX_SELECTION_REDRAWS} draws")


def run_replicate(scenario: ScenarioConfig, mech: MechanismSpec, grid: GridOptions, replicate_index: int) -> ReplicateResult:
    pop, out, redraws = select_replicate(scenario, mech, replicate_index)
    m_pub = int(out.published.size)
    if m_pub < 4:
        return ReplicateResult(math.nan, math.nan, math.nan, m_pub, False, None, "too_few_published", False, redraws)
    sample = pop.subset(out.published)
    try:
        points = build_grid(sample, grid.n_alpha, grid.n_beta)
        result = grid_sensitivity(sample, points, grid.lrt_threshold, early_stop=grid.early_stop)
    except Exception as exc:  # never abort a scenario on one bad replicate
        log.debug("replicate %d failed: %s", replicate_index, exc)
        return ReplicateResult(math.nan, math.nan, math.nan, m_pub, False, None, "estimator_error", False, redraws)
    chosen = result.chosen
    fallback = False
    if chosen is None:
        # with early stopping every level has been visited when nothing passes
        chosen = fallback_point(result)
        fallback = True
    if chosen is None:
        return ReplicateResult(math.nan, math.nan, math.nan, m_pub, False, None, "no_converged_grid_point", True, redraws)
    fit = result.points[chosen].fit
    half = Z_975 * fit.se_theta
    return ReplicateResult(
        fit.theta_hat, fit.theta_hat - half, fit.theta_hat + half, m_pub, True, chosen, None, fallback, redraws
    )


def compute_metrics(results: Sequence[ReplicateResult], theta_true: float) -> ScenarioReport:
    """MSE, bias and coverage over converged replicates; m-bar over all of them."""
    results = list(results)
    if not results:
        raise EmptyReportError("no replicates")
    ok = [r for r in results if r.converged]
    if not ok:
        raise EmptyReportError("no converged replicates")
    n = len(ok)
    est = np.array([r.theta_adj for r in ok])
    err = est - theta_true
    sq = err * err
    mse = math.fsum(sq) / n
    bias = math.fsum(err) / n
    cover = math.fsum(1.0 for r in ok if r.ci_low <= theta_true <= r.ci_high) / n
    m_bar = math.fsum(r.m_published for r in results) / len(results)
    if n > 1:
        mean_est = math.fsum(est) / n
        sd = math.sqrt(math.fsum((est - mean_est) ** 2) / (n - 1))
        sd_sq = math.sqrt(math.fsum((sq - mse) ** 2) / (n - 1))
    else:
        sd = sd_sq = 0.0
    n_failed = len(results) - n
    return ScenarioReport(
        mse=mse,
        bias=bias,
        cp=cover,
        m_bar=m_bar,
        n_replicates_used=n,
        n_failed=n_failed,
        mc_se_bias=sd / math.sqrt(n),
        mc_se_mse=sd_sq / math.sqrt(n),
        n_fallback=sum(1 for r in ok if r.fallback),
        n_selection_redraws=sum(r.selection_redraws for r in results),
        unreliable=n_failed > UNRELIABLE_FAILURE_RATE * len(results),
    )


def _replicate_chunk(args):
    scenario, mech, grid, indices = args
    return [run_replicate(scenario, mech, grid, i) for i in indices]


def run_replicates(scenario, mech, n_replicates: int, grid: GridOptions = GridOptions(),
                   parallelism: int = 1) -> list:
    """Replicates ``0..n-1`` in index order, whatever the parallelism."""
    if n_replicates < 1:
        raise InvalidArgumentError("n_replicates must be at least 1")
    if parallelism <= 1 or n_replicates == 1:
        return [run_replicate(scenario, mech, grid, i) for i in range(n_replicates)]
    n_chunks = min(n_replicates, 4 * parallelism)
    chunks = [list(range(n_replicates))[k::n_chunks] for k in range(n_chunks)]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        parts = list(pool.map(_replicate_chunk, [(scenario, mech, grid, c) for c in chunks]))
    results: list = [None] * n_replicates
    for idx, part in zip(chunks, parts):
        for i, r in zip(idx, part):
            results[i] = r
    return results


def run_scenario(scenario: ScenarioConfig, mech: MechanismSpec, n_replicates: int,
                 parallelism: int = 1, grid: GridOptions = GridOptions()) -> ScenarioReport:
    results = run_replicates(scenario, mech, n_replicates, grid, parallelism)
    report = compute_metrics(results, scenario.theta_true)
    if report.unreliable:
        log.warning("more than %.0f%% of replicates failed (%d of %d)",
                    100 * UNRELIABLE_FAILURE_RATE, report.n_failed, n_replicates)
    return report


# ---------------------------------------------------------------------------
# Table 1
# ---------------------------------------------------------------------------

# (sigma0^2, sigma1^2, rho01) of the reported heterogeneity levels
TABLE1_SCENARIOS = ((0.0, 0.0, 0.0), (2.0, 3.0, 0.7), (2.0, 3.0, 0.0))
TABLE1_ROWS = ("copas_rho0", "copas_rho0.9", "significance", "standardized")

def row_mechanism(row: str, scenario: ScenarioConfig, alpha_sig: float = 0.05) -> MechanismSpec:
    """Uncalibrated mechanism for one Table-1 row label."""
    direction = direction_for(scenario)
    if row == "copas_rho0":
        return CopasLatent(0.0)
    if row == "copas_rho0.9":
        return CopasLatent(0.9)
    if row == "significance":
        return Significance(alpha_sig, 0.0, direction)
    if row == "standardized":
        return StandardizedLatent(0.5, direction)
    raise InvalidArgumentError(f"unknown Table-1 row {row!r}")


@dataclass
class CellResult:
    scenario: ScenarioConfig
    row: str
    mechanism: Optional[MechanismSpec]
    calibration: Optional[Calibration]
    report: Optional[ScenarioReport]
    error: Optional[str] = None

    @property
    def heterogeneity(self) -> tuple:
        return (self.scenario.sigma0_2, self.scenario.sigma1_2, self.scenario.rho01)


def calibrate_cell(scenario: ScenarioConfig, row: str, target: float, tol: float, pilots,
                   alpha_sig: float = 0.05) -> Calibration:
    mech = row_mechanism(row, scenario, alpha_sig)
    eff = effective_mechanism(mech, scenario)
    cal = calibrate_rate(eff, scenario, target, tol, len(pilots), populations=pilots)
    # store the user-facing (undirected) Copas correlation
    return replace(cal, spec=replace(cal.spec, rho_sel=mech.rho_sel)) if isinstance(mech, CopasLatent) else cal


def run_cell(scenario, row, n_replicates, parallelism=1, grid=GridOptions(), target=0.70, tol=0.01,
             pilots=None, pilot_replicates=200, alpha_sig=0.05) -> CellResult:
    if pilots is None:
        pilots = pilot_populations(scenario, pilot_replicates)
    try:
        cal = calibrate_cell(scenario, row, target, tol, pilots, alpha_sig)
    except Exception as exc:
        return CellResult(scenario, row, None, None, None, f"{type(exc).__name__}: {exc}")
    report = run_scenario(scenario, cal.spec, n_replicates, parallelism, grid)
    return CellResult(scenario, row, cal.spec, cal, report)


TABLE1_COLUMNS = ["sigma0_2", "sigma1_2", "rho01", "mechanism", "mech_param", "mse", "bias", "cp", "m_bar", "n_failed"]


def _g(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return f"{float(x):.17g}"


def table1_csv(cells: Sequence[CellResult], master_seed: int) -> str:
    buf = io.StringIO()
    buf.write(f"# master_seed={master_seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE1_COLUMNS)
    for c in cells:
        r = c.report
        param = c.mechanism.free_param if c.mechanism is not None else None
        w.writerow([
            _g(c.scenario.sigma0_2), _g(c.scenario.sigma1_2), _g(c.scenario.rho01), c.row, _g(param),
            _g(r.mse if r else None), _g(r.bias if r else None), _g(r.cp if r else None),
            _g(r.m_bar if r else None), str(r.n_failed) if r else "",
        ])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Figure data
# ---------------------------------------------------------------------------

BIN_WIDTH = 0.25


@dataclass
class FigureData:
    mechanism: str
    standardized: np.ndarray
    published: np.ndarray
    bin_edges: np.ndarray
    count_published: np.ndarray
    count_eliminated: np.ndarray
    cutoff: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def raw_csv(self) -> str:
        lines = ["standardized,published,mechanism"]
        lines += [f"{z:.17g},{int(p)},{self.mechanism}" for z, p in zip(self.standardized, self.published)]
        return "\n".join(lines) + "\n"

    def binned_csv(self) -> str:
        lines = ["bin_left,bin_right,count_published,count_eliminated"]
        for k in range(self.count_published.size):
            lines.append(
                f"{self.bin_edges[k]:.17g},{self.bin_edges[k + 1]:.17g},"
                f"{self.count_published[k]},{self.count_eliminated[k]}"
            )
        return "\n".join(lines) + "\n"


def bin_edges_for(values: np.ndarray, width: float = BIN_WIDTH) -> np.ndarray:
    lo = math.floor(float(np.min(values)) / width) * width
    hi = math.ceil(float(np.max(values)) / width) * width
    if hi <= lo:
        hi = lo + width
    n = int(round((hi - lo) / width))
    return lo + width * np.arange(n + 1)


def emit_figure_data(scenario: ScenarioConfig, mech: MechanismSpec, n_replicates: int = 200,
                     label: Optional[str] = None) -> FigureData:
    """Pooled standardized effects of ``n_replicates`` populations with their
    publication flags, plus counts in bins of width 0.25."""
    key = scenario_key(scenario)
    eff = effective_mechanism(mech, scenario)
    zs, flags = [], []
    tag = ["figure"] + _mech_tag(mech)
    for i in range(n_replicates):
        pop = simulate_population(scenario, stream(scenario.seed, key, i, "figure-population"))
        out = apply_mechanism(eff, pop, stream(scenario.seed, key, i, tag))
        zs.append(pop.standardized)
        flags.append(out.mask)
    z = np.concatenate(zs)
    pub = np.concatenate(flags)
    edges = bin_edges_for(z)
    cp, _ = np.histogram(z[pub], bins=edges)
    ce, _ = np.histogram(z[~pub], bins=edges)
    cutoff = significance_cutoff(mech.alpha_sig) if isinstance(mech, Significance) else None
    return FigureData(label or mech.kind, z, pub, edges, cp, ce, cutoff, {"mechanism": mechanism_to_dict(mech)})
