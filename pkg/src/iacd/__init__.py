"""Duration-model estimation and tests at the unit-persistence boundary.

The package simulates, fits and tests autoregressive conditional duration
models observed over a fixed calendar span, with particular care for the
boundary case ``alpha + beta = 1`` where durations have infinite mean and
the estimator converges at the ``sqrt(t / log t)`` rate.
"""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    ConfigError,
    EmptySeriesError,
    FilterOverflowError,
    IacdError,
    IngestionError,
    NonConvergenceError,
    NonstationaryError,
    SingularInformationError,
    SolverError,
)
from .model import (
    DEFAULT_BOUNDS,
    EULER_GAMMA,
    DurationSeries,
    InnovationSpec,
    ParamBounds,
    ParamPhi,
    ParamTheta,
    beta_complement,
    c0_constant,
    psi_filter,
    sample_innovation,
    stationarity_functional,
    tail_index,
    weibull_shape_for_variance,
)
from .rng import derive_seed, substream, unit_exponential
from .simulate import (
    SimConfig,
    calibrate_span,
    read_series_csv,
    simulate_span,
    simulate_span_with_rng,
    write_series_csv,
)
from .likelihood import (
    GAMMA_RESTRICTION,
    FitOptions,
    FitResult,
    filtered_psi,
    fit_restricted,
    fit_unrestricted,
    loglik,
    score_and_info,
)
from .inference import (
    TestReport,
    decide,
    format_estimates_table,
    gaussian_quantile,
    parameter_standard_errors,
    qlr_stat,
    report_table_row,
    sigma_hat,
    standard_error_sum,
    tau_from_fit,
    tau_stat,
)
from .montecarlo import (
    ErpTable,
    ExperimentDesign,
    PowerDesign,
    PowerStudyResult,
    SizeStudyResult,
    innovation_for_sigma2,
    qq_data,
    run_power_study,
    run_size_study,
    write_qq_csv,
)
from .pipeline import (
    AcfResult,
    AdjustedDurations,
    DiurnalModel,
    RawDurations,
    TradeTape,
    acf,
    day_start_indices,
    diurnal_adjust,
    durations_from_tape,
    fit_diurnal,
)

__all__ = [name for name in dir() if not name.startswith("_")]
