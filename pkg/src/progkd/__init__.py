"""Progressive, frequency-domain feature distillation for small object detectors.

The package is self-contained on top of numpy and scipy: a small taped
autodiff engine, a mixed-radix FFT, a three-scale anchor-free detector, a
synthetic multi-domain shapes dataset, COCO-style evaluation and the
staged distillation pipeline with its ablation grids.
"""

from .ablation import AblationConfig, Experiment, run_grid
from .analysis import pairwise_cka
from .config import RunConfig, load_config, parse_config
from .distill import (ConfigError, MetricsLog, PipelineConfig, StageConfig, distill_stage, evaluate,
                      load_detector, mse_loss, progressive_pipeline, save_detector, spectral_loss, train_scratch)
from .losses import DistillLossConfig, LossKind, detection_loss, distill_distance
from .metrics import APResult, average_precision
from .models import Detector, DetectorSpec, Projector, Scale, detect
from .similarity import linear_cka
from .spectral import ComplexSpectrum, amplitude, fft2, ifft2, phase, unit_phase
from .synthdata import Dataset, generate_dataset, in_memory_dataset, load_dataset
from .tensor import GradTape, Parameter, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "APResult", "AblationConfig", "ComplexSpectrum", "ConfigError", "Dataset", "Detector", "DetectorSpec",
    "DistillLossConfig", "Experiment", "GradTape", "LossKind", "MetricsLog", "Parameter", "PipelineConfig",
    "Projector", "RunConfig", "Scale", "StageConfig", "Tensor", "amplitude", "average_precision", "backward",
    "detect", "detection_loss", "distill_distance", "distill_stage", "evaluate", "fft2", "generate_dataset",
    "ifft2", "in_memory_dataset", "linear_cka", "load_config", "load_detector", "load_dataset", "mse_loss",
    "pairwise_cka", "parse_config", "phase", "progressive_pipeline", "run_grid", "save_detector",
    "spectral_loss", "train_scratch", "unit_phase",
]
