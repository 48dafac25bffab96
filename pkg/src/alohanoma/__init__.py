"""Multi-cell slotted-Aloha network simulator and transmission-probability
optimizers (NOMA/SIC decoding, geometric-mean capacity objective)."""

from .topology import (
    Topology,
    associate_nearest,
    generate_mesh_deployment,
    generate_uniform_deployment,
    place_bs_lloyd,
)
from .channel import (
    ChannelModel,
    GeomeanObjective,
    RateEstimate,
    SlotOutcome,
    TransmissionPolicy,
    db_to_linear,
    dbm_to_watts,
    decode_slot,
    estimate_expected_rates,
    objective_geomean,
    received_power,
    simulate_slot,
    slot_rates_for_masks,
)
from .oracle import (
    CapacityExceededError,
    ConcavityReport,
    ConditionalRateTable,
    build_conditional_table,
    conditional_split,
    exact_expected_rate,
    exact_expected_rate_batch,
    exact_objective,
    finite_difference_hessians,
    midpoint_concavity_check,
    theorem_bounds_three_users,
    verify_concavity,
)
from .envs import MonteCarloEnv, OracleEnv
from .brd import (
    AggregatorVector,
    BrConfig,
    BrResult,
    BrTrace,
    K_AGGREGATOR,
    compute_aggregator,
    fixed_point_best_response,
    probe_conditional_rates,
    run_best_response,
)
from .icnn import (
    CentralizedConfig,
    CentralizedResult,
    EnsemblePrediction,
    IcnnEnsemble,
    IcnnParams,
    TrainingFailedError,
    ensemble_predict,
    icnn_forward,
    icnn_init,
    icnn_input_gradients,
    nll_loss,
    nll_parameter_gradients,
    run_centralized_optimization,
    train_ensemble,
    train_icnn,
    ucb_maximize,
)
from .baselines import OptimizerBudget, nelder_mead_maximize, random_search_maximize
from .experiment import (
    ConfigError,
    ExperimentConfig,
    dump_config,
    parse_config,
    run_experiment,
)
from .metrics import (
    UndefinedMetricError,
    approximation_ratio,
    evaluations_to_ratio,
    jain_fairness,
    noma_gain,
    noma_gain_from_objectives,
)

__version__ = "0.1.0"
