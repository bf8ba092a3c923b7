from .dataset import (
    DEFAULT_TEMPLATE,
    PrefixSample,
    build_prefix_dataset,
    load_prefix_dataset,
    render_template,
    save_prefix_dataset,
    split_template,
)
from .generate import DecodeConfig, GeneratedPrefix, generate_prefix
from .lora import (
    LoraAdapter,
    LoraLinear,
    LoraMatrix,
    load_adapter,
    lora_wrap,
    measured_rank,
    save_adapter,
)
from .surrogate import CharTokenizer, TinyCausalLm
from .training import PrefixTrainConfig, encode_sample, train_prefix_generator

__all__ = [
    "CharTokenizer",
    "DEFAULT_TEMPLATE",
    "DecodeConfig",
    "GeneratedPrefix",
    "LoraAdapter",
    "LoraLinear",
    "LoraMatrix",
    "PrefixSample",
    "PrefixTrainConfig",
    "TinyCausalLm",
    "build_prefix_dataset",
    "encode_sample",
    "generate_prefix",
    "load_adapter",
    "load_prefix_dataset",
    "lora_wrap",
    "measured_rank",
    "render_template",
    "save_adapter",
    "save_prefix_dataset",
    "split_template",
    "train_prefix_generator",
]
