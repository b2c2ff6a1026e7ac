"""Zero-delay analog multiple-description mappings: deterministic-annealing
design, MMSE evaluation, information-theoretic bounds and linear baselines."""

from .annealer import (
    AnnealSchedule,
    AnnealTrace,
    Association,
    LocalModelSet,
    anneal,
    free_energy,
    gibbs_associations,
    greedy_refine,
    model_cost_table,
    per_point_model_cost,
    update_models,
)
from .baselines import (
    LinearSchemeResult,
    linear_closed_form,
    linear_scheme,
    projection_baseline_2to1,
)
from .decoders import DecoderTable, optimal_decoders, randomized_decoders
from .errors import (
    AnalogMdError,
    ConfigurationError,
    ConsistencyError,
    ContractViolation,
    DomainError,
    EvaluationError,
)
from .md2to1 import (
    Source2DGrid,
    VectorMapping,
    anneal_2to1,
    build_source_2d_grid,
    evaluate_system_2to1,
    evaluate_with_optimal_decoders_2to1,
    optimal_decoders_2to1,
)
from .numerics import (
    ChannelGrid,
    SourceGrid,
    build_channel_grid,
    build_source_grid,
    channel_grid_for_range,
    gaussian_density,
    integrate_1d,
    integrate_2d,
)
from .opta import OptaPoint, OptaQuery, opta_central, opta_min_cost, opta_side_bound
from .system import (
    Metrics,
    Mode,
    ScalarMapping,
    SystemConfig,
    channel_grids_for,
    evaluate_system,
    evaluate_with_optimal_decoders,
    transmission_power,
)

__version__ = "0.1.0"
