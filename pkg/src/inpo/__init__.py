"""Preference alignment for small diffusion models via latent inversion."""

from .data import (
    PreferencePair,
    RewardSpec,
    default_reward_spec,
    gen_toy_dataset,
    load_pairs,
    make_preference_pairs,
    relabel_pairs,
    save_pairs,
    score,
)
from .denoiser import (
    NULL_CONDITION,
    DenoiserArch,
    DenoiserParams,
    init_denoiser,
    load_params,
    loss_gradient,
    predict_noise,
    save_params,
)
from .evaluation import (
    EvalReport,
    emit_report,
    inversion_roundtrip,
    oracle_ode_integrate,
    win_rate,
)
from .preference import (
    DeltaStrategy,
    LossBreakdown,
    dpo_diffusion_loss,
    implicit_reward,
    inpo_loss,
    make_targets,
    sft_loss,
    solve_delta_fixed_point,
)
from .sampler import (
    InversionResult,
    SamplerConfig,
    compute_tau,
    ddim_invert,
    ddim_sample,
    initial_variable,
    reconstruct_xt,
)
from .schedule import NoiseSchedule, forward_diffuse, make_schedule, schedule_at
from .trainer import (
    AlignConfig,
    Checkpoint,
    align,
    load_checkpoint,
    pretrain_base,
    save_checkpoint,
    sft_ref_init,
)

__all__ = [
    "NULL_CONDITION",
    "AlignConfig",
    "Checkpoint",
    "DeltaStrategy",
    "DenoiserArch",
    "DenoiserParams",
    "EvalReport",
    "InversionResult",
    "LossBreakdown",
    "NoiseSchedule",
    "PreferencePair",
    "RewardSpec",
    "SamplerConfig",
    "align",
    "compute_tau",
    "ddim_invert",
    "ddim_sample",
    "default_reward_spec",
    "dpo_diffusion_loss",
    "emit_report",
    "forward_diffuse",
    "gen_toy_dataset",
    "implicit_reward",
    "init_denoiser",
    "initial_variable",
    "inpo_loss",
    "inversion_roundtrip",
    "load_checkpoint",
    "load_pairs",
    "load_params",
    "loss_gradient",
    "make_preference_pairs",
    "make_schedule",
    "make_targets",
    "oracle_ode_integrate",
    "predict_noise",
    "pretrain_base",
    "reconstruct_xt",
    "relabel_pairs",
    "save_checkpoint",
    "save_pairs",
    "save_params",
    "schedule_at",
    "score",
    "sft_loss",
    "sft_ref_init",
    "solve_delta_fixed_point",
    "win_rate",
]
