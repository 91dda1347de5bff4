"""Battery remaining-useful-life prognostics: signal preprocessing, a hybrid
CNN / attentional LSTM / ODE-LSTM regressor, and training, transfer and
evaluation tooling."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .dataset import CellHistory, MinMaxScaler, Sample, load_cells, make_dataset, write_cells
from .errors import (ConfigError, ContractError, DegenerateRangeError, DimensionError,
                     InsufficientDataError, ParseError, RulforgeError, StateError, WindowBoundsError)
from .metrics import EvalRecord, mape, r2, rmse
from .model import ModelConfig, init_params, model_forward, predict
from .preprocess import DenoiseConfig, PrepConfig, RawCycleSignals, build_sample
from .synth import SynthConfig, synthesize_cells
from .tensor import ParamStore, Tape, Tensor
from .training import FreezeMask, TrainConfig, ensemble_predict, run_case, train_one, transfer_finetune

__all__ = [
    "CellHistory", "ConfigError", "ContractError", "DegenerateRangeError", "DenoiseConfig",
    "DimensionError", "EvalRecord", "FreezeMask", "InsufficientDataError", "MinMaxScaler",
    "ModelConfig", "ParamStore", "ParseError", "PrepConfig", "RawCycleSignals", "RulforgeError",
    "RunConfig", "Sample", "StateError", "SynthConfig", "Tape", "Tensor", "TrainConfig",
    "WindowBoundsError", "build_sample", "ensemble_predict", "init_params", "load_cells",
    "load_config", "make_dataset", "mape", "model_forward", "predict", "r2", "rmse", "run_case",
    "synthesize_cells", "train_one", "transfer_finetune", "write_cells",
]
