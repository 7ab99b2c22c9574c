"""Python access to the wmlab experiment pipeline."""

from ._wmlab import (
    ArgumentError,
    ConfigError,
    IntegrityError,
    NumericError,
    TrainingError,
    __version__,
    attack,
    derive_seed,
    evaluate,
    ew_reweight,
    landscape,
    load_checkpoint,
    report,
    resolve_config,
    train,
    wsr_from_predictions,
)

__all__ = [
    "ArgumentError",
    "ConfigError",
    "IntegrityError",
    "NumericError",
    "TrainingError",
    "attack",
    "derive_seed",
    "evaluate",
    "ew_reweight",
    "landscape",
    "load_checkpoint",
    "report",
    "resolve_config",
    "train",
    "wsr_from_predictions",
]
