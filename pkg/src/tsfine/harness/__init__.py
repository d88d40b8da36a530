"""Configuration, end-to-end pipeline, Monte-Carlo evaluation and the CLI."""
from .config import ExperimentConfig, load_config, preset
from .pipeline import FinetuneOutcome, estimate, finetune_observation, pretrain

__all__ = ["ExperimentConfig", "load_config", "preset", "pretrain", "estimate",
           "finetune_observation", "FinetuneOutcome"]
