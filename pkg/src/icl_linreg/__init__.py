"""In-context learning of noisy linear regression, with exact Bayesian
baselines for every prediction the model makes."""

from .errors import ConfigError, MissingSeriesError, NumericalError, SingularContextError
from .evaluation import (
    DmmsePredictor,
    EvalReport,
    PTPredictor,
    Predictor,
    RidgePredictor,
    SmmsePredictor,
    ZeroPredictor,
    eval_delta,
    eval_interpolation,
    eval_loss,
    find_threshold,
    interpolate_tasks,
)
from .harness import (
    EvalSettings,
    ExperimentConfig,
    RunRecord,
    base_config,
    desk_config,
    dimsweep_config,
    export_plot_data,
    oracle_eval,
    run_experiment,
    snr_matched_sigma2,
    sweep,
)
from .model import ModelConfig, forward, init_params, param_count
from .oracles import (
    EstimatorPrediction,
    GaussianMixturePrior,
    OracleContext,
    brute_force_posterior,
    dmmse_predict,
    optimal_epsilon_search,
    ridge_predict,
    smmse_predict,
)
from .rng import RngHandle
from .tasks import (
    RegressionSequence,
    Task,
    TaskDistribution,
    sample_batch,
    sample_pretrain_set,
    sample_sequence,
    sample_task,
)
from .train import TrainConfig, adam_step, loss_and_grad, lr_at_step, train

__version__ = "0.1.0"
