"""Transformer causal model: configuration, network, losses and training."""
from .config import MODES, ModelConfig, desk_preset, load_config, paper_preset
from .net import TBEHRT, ForwardOutput
from .train import FitResult, InputAudit, encode_cohort, fit

__all__ = [
    "MODES", "ModelConfig", "desk_preset", "load_config", "paper_preset",
    "TBEHRT", "ForwardOutput", "FitResult", "InputAudit", "encode_cohort", "fit",
]
