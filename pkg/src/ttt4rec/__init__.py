"""Sequential recommendation with test-time-training sequence layers, on a small numpy autodiff engine."""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .data import SequenceDataset, build_dataset, parse_interactions
from .errors import (CheckpointError, ConfigError, ConfigMismatchError, DataError,
                     DivergenceError, NumericalError, ShapeError)
from .metrics import EvalReport, evaluate
from .model import ModelConfig, TTT4Rec, fit, recommend
from .tensor import Tensor, backward, finite_diff_check
from .ttt import InnerLoopConfig, ttt_scan

__version__ = "0.1.0"
