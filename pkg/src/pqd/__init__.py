"""Time-aware post-training quantization for a toy diffusion model."""

__version__ = "0.1.0"

from .calibration import (CalibrationConfig, CalibrationSet, STRATEGIES, build_calibration_set,
                          calibrate_activations, pqd_quantize, sample_timestep)
from .denoiser import (UNCONDITIONAL, Denoiser, TrainConfig, init_denoiser, record_activation_stats,
                       train_denoiser, zero_denoiser)
from .errors import ConfigError, FormatError, NumericalError, PQDError
from .metrics import EvalReport, bops_per_step, evaluate, mmd_rbf, model_size_bits, sliced_wasserstein
from .quant import (QuantizedModel, QuantParams, build_quantized_model, l2_optimal_params,
                    minmax_params, quant_dequant, quantized_forward)
from .schedule import (NoiseSchedule, ddim_step, ddpm_step, forward_diffuse, generate,
                       make_linear_schedule, sample_trajectory)

__all__ = [
    "CalibrationConfig", "CalibrationSet", "ConfigError", "Denoiser", "EvalReport", "FormatError",
    "NoiseSchedule", "NumericalError", "PQDError", "QuantParams", "QuantizedModel", "STRATEGIES",
    "TrainConfig", "UNCONDITIONAL", "bops_per_step", "build_calibration_set", "build_quantized_model",
    "calibrate_activations", "ddim_step", "ddpm_step", "evaluate", "forward_diffuse", "generate",
    "init_denoiser", "l2_optimal_params", "make_linear_schedule", "minmax_params", "mmd_rbf",
    "model_size_bits", "pqd_quantize", "quant_dequant", "quantized_forward", "record_activation_stats",
    "sample_timestep", "sample_trajectory", "sliced_wasserstein", "train_denoiser", "zero_denoiser",
]
