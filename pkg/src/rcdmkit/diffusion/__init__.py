"""
Diffusion side of rcdmkit: noise schedule, conditional denoiser, training
and sampling.
"""

from rcdmkit.diffusion.denoiser import DenoiserConfig, RCDMDenoiser, build_denoiser
from rcdmkit.diffusion.sampling import (
    KdeModel,
    interpolate,
    kde_fit,
    kde_sample,
    sample_conditional,
    sample_interpolation_path,
    sample_unconditional,
)
from rcdmkit.diffusion.schedule import NoiseSchedule, forward_diffuse, make_schedule
from rcdmkit.diffusion.training import train_rcdm

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "forward_diffuse",
    "DenoiserConfig",
    "RCDMDenoiser",
    "build_denoiser",
    "train_rcdm",
    "sample_conditional",
    "sample_interpolation_path",
    "sample_unconditional",
    "interpolate",
    "KdeModel",
    "kde_fit",
    "kde_sample",
]
