"""Conditional diffusion for star-field image enhancement, trained with
dynamic stochastic corruption of the condition image."""
from .corruption import CorruptionSpec, corrupt, preset
from .denoiser import DenoiserConfig, init_denoiser, load_checkpoint, save_checkpoint
from .diffusion import enhance, q_sample, reverse_step, training_loss
from .metrics import psnr, ssim
from .schedule import NoiseSchedule, make_linear_schedule
from .trainer import PhaseConfig, TrainConfig, train_cascade

__version__ = "0.1.0"
