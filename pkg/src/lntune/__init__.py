"""LayerNorm tuning and parameter-efficient fine-tuning baselines on a minimal NumPy Transformer."""

from .accounting import PRESETS, ParamCount, count_params, solve_alignment
from .autodiff import Tensor, backward, no_grad
from .peft import LnAblation, ParameterGroup, PeftMethod, apply_method, collapse_prefix
from .tasks import SyntheticTask, evaluate, generate_task, rouge_l, standard_transfer_task
from .train import TrainConfig, lr_search, train
from .transformer import ModelShape, TransformerModel, forward

__all__ = [
    "PRESETS",
    "LnAblation",
    "ModelShape",
    "ParamCount",
    "ParameterGroup",
    "PeftMethod",
    "SyntheticTask",
    "Tensor",
    "TrainConfig",
    "TransformerModel",
    "apply_method",
    "backward",
    "collapse_prefix",
    "count_params",
    "evaluate",
    "forward",
    "generate_task",
    "lr_search",
    "no_grad",
    "rouge_l",
    "solve_alignment",
    "standard_transfer_task",
    "train",
]
