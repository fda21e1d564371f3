from .config import ModelConfig, RunConfig, TrainConfig, load_run_config
from .datagen import InMemoryDataset, MixtureExample, SeparationDataset, make_example, simulate_dataset
from .evaluation import MetricsReport, cpu_rtf, profile, sdri, si_snri
from .numerics import Tensor, grad_check, no_grad, precision
from .tdanet import TDANet, count_macs, count_params
from .training import pit_loss, si_snr, train_loop

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "RunConfig", "TrainConfig", "load_run_config",
    "InMemoryDataset", "MixtureExample", "SeparationDataset", "make_example", "simulate_dataset",
    "MetricsReport", "cpu_rtf", "profile", "sdri", "si_snri",
    "Tensor", "grad_check", "no_grad", "precision",
    "TDANet", "count_macs", "count_params",
    "pit_loss", "si_snr", "train_loop",
]
