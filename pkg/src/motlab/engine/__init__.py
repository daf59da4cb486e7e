"""Toy query model, training loop and inference."""
from .infer import TrackOutput, run_inference, write_tracks
from .model import ModelParams, QueryBatch, SlotParams, StagePredictions, backward, forward
from .train import FrameMatchings, Trainer, TrainSequence, TrainingError, frame_objective, optimizer_step

__all__ = [
    "FrameMatchings", "ModelParams", "QueryBatch", "SlotParams", "StagePredictions", "TrackOutput",
    "TrainSequence", "Trainer", "TrainingError", "backward", "forward", "frame_objective",
    "optimizer_step", "run_inference", "write_tracks",
]
