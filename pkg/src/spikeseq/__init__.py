"""spikeseq: surrogate-gradient training of spiking recurrent encoders
for sequence transcription."""

from .tensor import (
    Tensor,
    SurrogateSpec,
    backward,
    eval_primitive,
    finite_diff_check,
    heaviside_surrogate,
)
from .encoder import ConvSpec, EncoderConfig, LayerSpec, encoder_forward, \
    init_encoder
from .ctc import BLANK_ID, ctc_greedy_decode, ctc_loss
from .metrics import ErrorRateReport, credible_interval, edit_distance
from .data import SynthSpec, generate_synthetic, pad_batch
from .training import TrainConfig, RunMetrics, train_run

__all__ = [
    "Tensor",
    "SurrogateSpec",
    "backward",
    "eval_primitive",
    "finite_diff_check",
    "heaviside_surrogate",
    "ConvSpec",
    "EncoderConfig",
    "LayerSpec",
    "encoder_forward",
    "init_encoder",
    "BLANK_ID",
    "ctc_greedy_decode",
    "ctc_loss",
    "ErrorRateReport",
    "credible_interval",
    "edit_distance",
    "SynthSpec",
    "generate_synthetic",
    "pad_batch",
    "TrainConfig",
    "RunMetrics",
    "train_run",
]

__version__ = "0.1.0"
