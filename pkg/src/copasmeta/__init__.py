"""Copas selection-model sensitivity analysis for meta-analysis, with a
simulation harness for its behaviour under different publication-bias
mechanisms."""

__version__ = "0.1.0"

from .copas import (
    CopasFit,
    GridPoint,
    GridResult,
    SelectionParams,
    build_grid,
    copas_log_likelihood,
    fit_copas,
    grid_sensitivity,
    inverse_mills,
    selection_bias_lrt,
)
from .errors import (
    CalibrationInfeasibleError,
    ConfigurationError,
    CopasMetaError,
    DataError,
    EstimationError,
    InvalidArgumentError,
)
from .harness import GridOptions, ReplicateResult, ScenarioReport, emit_figure_data, run_replicate, run_scenario
from .model_core import AggregatedStudy, MetaSample, fit_random_effects, read_studies_csv, re_log_likelihood
from .selection import (
    CopasLatent,
    Significance,
    StandardizedLatent,
    apply_mechanism,
    calibrate_rate,
    solve_latent_params,
)
from .simulate import Population, ScenarioConfig, simulate_population

__all__ = [name for name in dir() if not name.startswith("_")]
