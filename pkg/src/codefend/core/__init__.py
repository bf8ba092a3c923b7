from .images import (
    ImageTensor,
    clip01,
    read_image,
    read_npybin,
    read_png,
    write_image,
    write_npybin,
    write_png,
)
from .manifest import (
    AdvPair,
    PairEntry,
    PairManifest,
    load_manifest,
    manifest_digest,
    save_manifest,
    split_manifest,
)
from .rng import Rng

__all__ = [
    "AdvPair",
    "ImageTensor",
    "PairEntry",
    "PairManifest",
    "Rng",
    "clip01",
    "load_manifest",
    "manifest_digest",
    "read_image",
    "read_npybin",
    "read_png",
    "save_manifest",
    "split_manifest",
    "write_image",
    "write_npybin",
    "write_png",
]
