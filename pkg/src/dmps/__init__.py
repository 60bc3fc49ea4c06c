"""Message passing on sets: latent-graph estimation by a deep RBF kernel,
set-denoising and set-residual blocks, permutation-invariant pooling, a graph
diffusion toolkit and two synthetic set-learning tasks."""

from .autodiff import ParamStore, Tape, Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import OptimConfig, RunConfig, default_config, load_config
from .diffusion import (
    DiffusionTrace,
    WeightedGraph,
    diffusion_step,
    dirichlet_energy,
    simulate_to_steady_state,
)
from .latent_graph import ConfigError, EmptySetError, KernelConfig, LatentGraph, build_latent_graph
from .model import (
    BlockConfig,
    DMPSModel,
    EncoderConfig,
    HeadConfig,
    ModelConfig,
    dmps_forward,
    message_passing_step,
    pool_set,
    set_denoising_block,
    set_residual_block,
    vanilla_block,
)
from .training import NumericalAbort, evaluate, export_kernel, sweep_gamma, sweep_rho, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "ParamStore",
    "ConfigError", "EmptySetError", "NumericalAbort", "CheckpointError",
    "KernelConfig", "LatentGraph", "build_latent_graph",
    "EncoderConfig", "BlockConfig", "HeadConfig", "ModelConfig", "DMPSModel", "dmps_forward",
    "message_passing_step", "vanilla_block", "set_denoising_block", "set_residual_block", "pool_set",
    "WeightedGraph", "DiffusionTrace", "dirichlet_energy", "diffusion_step", "simulate_to_steady_state",
    "OptimConfig", "RunConfig", "default_config", "load_config",
    "train", "evaluate", "sweep_rho", "sweep_gamma", "export_kernel",
    "save_checkpoint", "load_checkpoint",
]
