"""Rejection sampling on the reverse transitions of a discrete diffusion model.

The package is organized around a desk-scale laboratory: Gaussian-mixture
targets with closed-form perturbed marginals and reverse conditionals, a
discrete VP base sampler, a time-conditioned discriminator for density-ratio
estimation, the sequential rejection engine with adaptive re-initialization,
and Monte-Carlo verification of the sampling-error bound.
"""

__version__ = "0.1.0"

from .schedule import NoiseSchedule, make_vp_schedule
from .gmm import (
    GaussianMixture,
    MarginalTable,
    ReversePosterior,
    forward_marginal,
    gmm_from_dict,
    gmm_to_dict,
    load_gmm,
    oracle_log_ratio,
    reverse_posterior,
    save_gmm,
    standard_normal,
)
from .diffusion import (
    ChainRecord,
    DiffusionModel,
    Event,
    base_sample,
    chain_streams,
    forward_perturb,
    model_transition,
    one_step_forward,
)
from .discriminator import (
    DiscriminatorModel,
    TrainConfig,
    TrainReport,
    disc_logit,
    disc_logit_batch,
    init_discriminator,
    load_checkpoint,
    save_checkpoint,
    train_discriminator,
)
from .rejection import (
    BudgetExhausted,
    ConstantRatio,
    DiscriminatorRatio,
    EvalBudget,
    OracleRatio,
    RejectionConstants,
    SampleStreams,
    Strategy,
    acceptance_prob,
    calibrate_constants,
    diffrs_sample,
    load_constants,
    one_step_diffrs,
    reinitialize,
    save_constants,
    trivial_constants,
)
from .evaluation import (
    BoundEstimate,
    RunSummary,
    energy_distance,
    energy_two_sample_test,
    estimate_acceptance_term,
    estimate_kl_bound,
    sliced_wasserstein,
    summarize_run,
)
from .config import ExperimentConfig, parse_config, dump_config
from .harness import run_experiment, sweep_gamma
