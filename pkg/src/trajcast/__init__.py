"""Trajectory forecasting with social and static scene context.

Subpackages of note: :mod:`trajcast.ndgrad` (reverse-mode autodiff),
:mod:`trajcast.sscn` (scene likelihood network), :mod:`trajcast.pooling`,
:mod:`trajcast.seq2seq` (attention encoder-decoder) and
:mod:`trajcast.training` (training loops, metrics, leave-one-out).
"""

from .errors import ConfigError, ContractError, DataError, DimensionError, ParseError, TrainingError, TrajcastError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "ParseError",
    "TrainingError",
    "TrajcastError",
    "__version__",
]
