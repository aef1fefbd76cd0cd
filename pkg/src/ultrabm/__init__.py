"""Joint low-light enhancement and super-resolution (UltraBM) in PyTorch."""
from .errors import (ConfigError, ImageFormatError, ManifestError, ShapeError, TrainingError,
                     UltraBMError)
from .pipeline import (ModelConfig, OptimConfig, Stage, TrainState, UltraBM, build_model, evaluate,
                       load_checkpoint, predict, save_checkpoint, train, train_step)

__version__ = "0.1.0"
