"""Model-parallel training with fully decoupled modules and delayed, shrunk gradients."""
from .config import RunConfig, from_ini, load_config, to_ini
from .data import Dataset, batch_stream, gen_synthetic, load_idx, train_test_split
from .layers import Network, build_network, module_backward, module_forward
from .optim import SGD, LrSchedule, lr_at
from .partition import ModulePartition, delay_of, gradient_batch_index, make_partition
from .scheduler import ModuleWorker, run_freerunning, run_lockstep
from .trainers import evaluate, train, train_bp, train_ddg, train_fdg
from .trainlog import TrainingLog

from .verification import grad_check, serial_emulate_fdg
from .speedup import CostProfile, ideal_speedup, simulate_pipeline

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "from_ini", "load_config", "to_ini",
    "Dataset", "batch_stream", "gen_synthetic", "load_idx", "train_test_split",
    "Network", "build_network", "module_backward", "module_forward",
    "SGD", "LrSchedule", "lr_at",
    "ModulePartition", "delay_of", "gradient_batch_index", "make_partition",
    "ModuleWorker", "run_freerunning", "run_lockstep",
    "evaluate", "train", "train_bp", "train_ddg", "train_fdg",
    "TrainingLog", "grad_check", "serial_emulate_fdg",
    "CostProfile", "ideal_speedup", "simulate_pipeline",
]
