from .decode import Hypothesis, infer_beam, infer_greedy
from .model import (
    CaptionerModel,
    DecoderState,
    ModelConfig,
    caption_log_prob,
    pad_captions,
    sequence_log_probs,
)
from .train import GATE_ACCURACY, TrainingDiverged, TrainLog, exact_match, train
from .vocab import END, PAD, START, Caption, Vocabulary, check_caption

__all__ = [
    "Caption",
    "CaptionerModel",
    "DecoderState",
    "END",
    "GATE_ACCURACY",
    "Hypothesis",
    "ModelConfig",
    "PAD",
    "START",
    "TrainLog",
    "TrainingDiverged",
    "Vocabulary",
    "caption_log_prob",
    "check_caption",
    "exact_match",
    "infer_beam",
    "infer_greedy",
    "pad_captions",
    "sequence_log_probs",
    "train",
]
