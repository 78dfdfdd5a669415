"""Command-line trainer: configuration, datasets, checkpoints, loops."""
from .config import ConfigError, RunConfig, parse_config_file
from .data import Dataset, gen_synthetic, load_dataset, save_dataset
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ConfigError", "RunConfig", "parse_config_file",
    "Dataset", "gen_synthetic", "load_dataset", "save_dataset",
    "load_checkpoint", "save_checkpoint",
]
