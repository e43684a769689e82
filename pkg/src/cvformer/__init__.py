"""Cross-view transformer for fMRI brain-network classification."""

from .autodiff import ContractError, NonFiniteError, ShapeError, Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, write_run_config
from .ingest import ConfigError, Dataset, LoadError, gen_synth, load_dataset
from .model import CvFormer, ModelConfig
from .training import ContrastiveConfig, TrainConfig, finetune, infonce_loss, pretrain

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "ContrastiveConfig", "CvFormer", "Dataset",
    "LoadError", "ModelConfig", "NonFiniteError", "RunConfig", "ShapeError", "Tensor", "TrainConfig",
    "finetune", "gen_synth", "infonce_loss", "load_checkpoint", "load_dataset", "load_run_config",
    "pretrain", "save_checkpoint", "write_run_config",
]
