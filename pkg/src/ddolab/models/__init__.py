from .ar import ARModel, ar_log_prob, ar_sample
from .base import MODEL_KINDS, Model
from .categorical import CategoricalDistribution, CategoricalModel, categorical_log_prob
from .checkpoint import CheckpointError, load_model, read_container, save_model, write_container
from .diffusion import (
    DiffusionModel,
    NoiseSchedule,
    denoise,
    diffusion_sample,
    draw_noise,
    edm_mle_loss,
    edm_weighted_denoiser_loss,
    f_residual,
    f_target,
)

__all__ = [
    "ARModel", "ar_log_prob", "ar_sample", "MODEL_KINDS", "Model",
    "CategoricalDistribution", "CategoricalModel", "categorical_log_prob",
    "CheckpointError", "load_model", "read_container", "save_model", "write_container",
    "DiffusionModel", "NoiseSchedule", "denoise", "diffusion_sample", "draw_noise",
    "edm_mle_loss", "edm_weighted_denoiser_loss", "f_residual", "f_target",
]
