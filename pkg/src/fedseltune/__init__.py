"""Desk-scale simulator for federated selective-layer fine-tuning."""

from .model import (
    Batch,
    ConfigError,
    GradientVector,
    LayeredModel,
    LayerSpec,
    apply_masked_update,
    backward,
    forward,
    init_model,
    mlp_specs,
)
from .data import (
    Dataset,
    PartitionError,
    PartitionPlan,
    Shard,
    dirichlet_partition,
    export_shards_csv,
    feature_skew_partition,
    generate_dataset,
    split_train_test,
)
from .protocol import (
    ClientState,
    RoundConfig,
    RoundRecord,
    aggregate,
    build_clients,
    compute_weights,
    evaluate,
    global_update,
    local_train,
    run_round,
    sample_clients,
)
from .selection import (
    CapacityError,
    EmptyShardError,
    SelectionProblem,
    SelectionResult,
    StrategyConfig,
    feasible_masks,
    p1_objective,
    probe_gradient_norms,
    select_masks,
    select_rgn,
    select_snr,
    select_static,
    solve_p1_exact,
    solve_p1_greedy,
)
from .diagnostics import (
    BoundEstimate,
    CostSummary,
    RoundDiagnostics,
    TheoryConstants,
    centralized_reference_minimum,
    chi_divergence,
    client_full_gradients,
    cost_model,
    estimate_constants,
    global_gradient,
    max_pairwise_smoothness,
    multistep_rhs,
    round_diagnostics,
    surrogate_gradient,
    theorem1_rhs,
)
from .experiment import (
    ExperimentConfig,
    load_config_dict,
    parse_config,
    run_experiment,
    sample_budgets,
    summarize_run,
    summary_rows,
)
from .rng import child_rng, derive_seed

__version__ = "0.1.0"
