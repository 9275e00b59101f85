"""Progressive layer dropping for a toy masked-language-model transformer.

Modules: ``autodiff`` (tape-based reverse mode), ``transformer`` (PostLN,
PreLN and switchable blocks), ``schedule`` (keep-ratio curve, gates,
FLOPS), ``instrumentation`` (layer-wise analyses), ``training`` and ``cli``.
"""

from .autodiff import Tape, Tensor, backward
from .schedule import DropSchedule, GateVector, layer_keep_probs, sample_gates, theta_bar
from .training import TrainConfig, train
from .transformer import Model, ModelConfig, forward_model

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward",
    "DropSchedule", "GateVector", "layer_keep_probs", "sample_gates", "theta_bar",
    "TrainConfig", "train",
    "Model", "ModelConfig", "forward_model",
]
