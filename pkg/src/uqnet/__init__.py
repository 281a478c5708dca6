"""Composite uncertainty propagation for energy-planning decision support.

Component emulators (Gaussian processes) and price models (dynamic linear
models) are composed over a feed-forward graph by closed-form first and
second moment propagation, yielding scenario-conditioned forecasts with
two-standard-deviation bands.
"""

from .dlm import (
    Dlm,
    DlmSpec,
    FilterState,
    PrecisionPrior,
    filter_series,
    filter_step,
    fit_dlm,
    fit_precisions,
    forecast_k,
    initial_state,
)
from .errors import UqnetError, ValidationError
from .gp import (
    Design,
    GpEmulator,
    HyperparamSearchConfig,
    KernelSpec,
    TrendBasis,
    eval_correlation,
    fit_gp,
    loo_diagnostics,
    rmse,
)
from .moments import GaussianMoments
from .network import (
    DlmNode,
    ExogenousNode,
    GpNode,
    NodeGraph,
    gauss_kernel_linear,
    gauss_kernel_mean,
    gauss_kernel_second,
    linked_gp_moments,
    mdm_marginal,
    propagate,
)
from .pipeline import (
    CaseStudyConfig,
    ModelStore,
    QuarterSeries,
    Scenario,
    apply_scenario,
    ingest,
    load_model,
    run_case_study,
    run_scenario,
    save_model,
)
from .simulators import (
    DispatchParams,
    HeatDemandParams,
    dispatch_cost,
    heating_demand,
    lhc_design,
)

__version__ = "0.1.0"
