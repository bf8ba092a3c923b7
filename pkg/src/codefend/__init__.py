"""Defense toolkit for vision-language systems: supervised diffusion
purification, protective-prefix generation, and evaluation."""

__version__ = "0.1.0"

from .core import AdvPair, ImageTensor, PairManifest, Rng  # noqa: F401
from .pipeline import DefenseConfig, ProviderRegistry, defend, defend_batch  # noqa: F401
