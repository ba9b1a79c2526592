"""Dense displacement regression network (numpy, hand-written backward)."""
from .model import NetSpec, init_params, forward, loss, gradients, param_names
from .train import TrainingConfig, TrainResult, TrainingDiverged, train, infer_field
from .checkpoint import save_checkpoint, load_checkpoint, encode_checkpoint, decode_checkpoint

__all__ = [
    "NetSpec",
    "init_params",
    "forward",
    "loss",
    "gradients",
    "param_names",
    "TrainingConfig",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "infer_field",
    "save_checkpoint",
    "load_checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
]
