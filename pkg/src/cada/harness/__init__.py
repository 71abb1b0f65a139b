"""Training loop, ablation runner, reporting and command-line entry point."""
from .config import RunConfig
from .train import RunResult, TrainState, init_state, train, train_step

__all__ = ["RunConfig", "RunResult", "TrainState", "init_state", "train", "train_step"]
