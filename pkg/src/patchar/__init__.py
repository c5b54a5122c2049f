"""Patch-level autoregressive generation of continuous tokens with a local diffusion decoder.

Submodules:

- ``numerics``: tape-based autodiff, attention, RMSNorm, RoPE, transformer blocks
- ``diffusion``: cosine VP schedule, velocity targets, x0 recovery
- ``sampler``: Euler and DDIM steps, temperature sampling, guidance mixing
- ``model``: aggregation encoder, causal LM, LocDiT, stop head, generation
- ``training``: toy sinusoid task, training loop, analytic oracles, evaluation
- ``flops``: closed-form FLOPs counts and an instrumented oracle
- ``cli``: the ``patchar`` command
"""

from .diffusion import DiffusionPoint, Prediction, forward_diffuse, schedule_eval, to_x0, velocity_target
from .flops import ArchSpec, CostReport, composite_report, measure_flops, reference_report
from .model import ModelConfig, PatchARModel, generate, generate_batch, load_checkpoint, save_checkpoint
from .sampler import GuidedScore, SamplerConfig, ddim_step, euler_step, guidance_mix, temperature_sample
from .training import TaskClasses, TrainConfig, evaluate, make_dataset, train

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "CostReport",
    "DiffusionPoint",
    "GuidedScore",
    "ModelConfig",
    "PatchARModel",
    "Prediction",
    "SamplerConfig",
    "TaskClasses",
    "TrainConfig",
    "ddim_step",
    "composite_report",
    "euler_step",
    "evaluate",
    "forward_diffuse",
    "generate",
    "generate_batch",
    "guidance_mix",
    "load_checkpoint",
    "make_dataset",
    "measure_flops",
    "reference_report",
    "save_checkpoint",
    "schedule_eval",
    "temperature_sample",
    "to_x0",
    "train",
    "velocity_target",
]
