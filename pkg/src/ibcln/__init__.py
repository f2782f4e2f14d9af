"""Single-image reflection removal with a cascaded pair of ConvLSTM networks."""

from .estimator import ReflectionRemover
from .evaluation import benchmark, psnr, ssim, timestep_sweep
from .imaging import ColorSpace, Image, SignedImage, gamma_decode, gamma_encode, load_image, save_image
from .losses import LossWeights
from .model import IBCLN, SubnetConfig, cascade_forward
from .synthesis import SynthesisConfig, compose, generate_dataset, residual_reflection
from .training import TrainConfig, Trainer, load_model, train

__version__ = "0.1.0"

__all__ = [
    "ColorSpace", "IBCLN", "Image", "LossWeights", "ReflectionRemover", "SignedImage", "SubnetConfig",
    "SynthesisConfig", "TrainConfig", "Trainer", "benchmark", "cascade_forward", "compose", "gamma_decode",
    "gamma_encode", "generate_dataset", "load_image", "load_model", "psnr", "residual_reflection",
    "save_image", "ssim", "timestep_sweep", "train",
]
