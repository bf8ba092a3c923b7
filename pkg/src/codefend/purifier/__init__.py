from .checkpoint import PurifierCheckpoint, load_checkpoint
from .sampling import SamplerConfig, purify
from .schedule import DiffusionSchedule, add_noise, cosine_schedule
from .surrogate import BlockPoolCodec, SurrogateNoisePredictor, text_features, time_features
from .training import DEFAULT_INSTRUCTION, TrainConfig, diffusion_loss, train_purifier

__all__ = [
    "BlockPoolCodec",
    "DEFAULT_INSTRUCTION",
    "DiffusionSchedule",
    "PurifierCheckpoint",
    "SamplerConfig",
    "SurrogateNoisePredictor",
    "TrainConfig",
    "add_noise",
    "cosine_schedule",
    "diffusion_loss",
    "load_checkpoint",
    "purify",
    "text_features",
    "time_features",
    "train_purifier",
]
