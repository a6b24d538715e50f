"""U-KAN: spline-activation (Kolmogorov-Arnold) U-Net for image segmentation
and DDPM image generation, on a self-contained reverse-mode autodiff core."""

__version__ = "0.1.0"

# training entry points live in ukan.train (re-exporting `train` here would
# shadow that submodule)
from .tensor import Tensor, default_dtype, grad_check, no_grad, set_default_dtype
from .kan import KanLayer, KanStack, MlpLayer, SplineSpec, bspline_basis
from .model import DiffusionUkan, Ukan, UkanConfig
from .diffusion import NoiseSchedule, ddpm_sample, linear_schedule, q_sample
from .config import TrainConfig, make_config

__all__ = [
    "Tensor", "default_dtype", "grad_check", "no_grad", "set_default_dtype",
    "KanLayer", "KanStack", "MlpLayer", "SplineSpec", "bspline_basis",
    "DiffusionUkan", "Ukan", "UkanConfig",
    "NoiseSchedule", "ddpm_sample", "linear_schedule", "q_sample",
    "TrainConfig", "make_config",
    "__version__",
]
