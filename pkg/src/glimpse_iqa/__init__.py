"""No-reference image quality assessment with a recurrent hard-attention model.

A small CNN reads multi-scale glimpses around a fixation, a two-layer RNN
integrates them, and a Gaussian location policy trained with REINFORCE picks
the next fixation. Per-step quality scores are pooled with learned weights;
the final state also predicts the distortion type.
"""
from .ndnum import Tape, Tensor, backward
from .imgproc import extract_glimpse, local_contrast_normalize, preprocess
from .net import (ModelConfig, aggregate_score, forward_episode, init_params, load_checkpoint,
                  save_checkpoint)
from .policy import GaussianPolicy, reinforce_grad_injection, reward
from .train import TrainConfig, fit
from .evaluation import MetricReport, evaluate, lcc, srocc

__all__ = [
    "Tape", "Tensor", "backward",
    "extract_glimpse", "local_contrast_normalize", "preprocess",
    "ModelConfig", "aggregate_score", "forward_episode", "init_params",
    "load_checkpoint", "save_checkpoint",
    "GaussianPolicy", "reinforce_grad_injection", "reward",
    "TrainConfig", "fit",
    "MetricReport", "evaluate", "lcc", "srocc",
]
__version__ = "0.1.0"
