"""Image tensors and on-disk codecs (PNG + raw float32 sidecar)."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import IoError, MissingFile, ShapeMismatch

NPYBIN_SUFFIX = ".npybin"


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Float image in [0,1], shape (H, W, C) with C in {1, 3}. Immutable."""

    data: np.ndarray
    id: str = field(default="")

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeMismatch(f"image must be (H, W, C), got shape {arr.shape}")
        h, w, c = arr.shape
        if h <= 0 or w <= 0 or c not in (1, 3):
            raise ShapeMismatch(f"bad image dims {arr.shape}; C must be 1 or 3")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"image {self.id!r} contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(
                f"image {self.id!r} has values outside [0,1]: "
                f"[{arr.min():.6f}, {arr.max():.6f}]"
            )
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def with_data(self, data: np.ndarray, id: str | None = None) -> "ImageTensor":
        return ImageTensor(data=data, id=self.id if id is None else id)

    def sha256(self) -> str:
        return hashlib.sha256(self.data.tobytes()).hexdigest()


def clip01(arr: np.ndarray) -> np.ndarray:
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def write_png(image: ImageTensor, path: Path | str) -> None:
    path = Path(path)
    arr = np.round(image.data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")


def read_png(path: Path | str, id: str | None = None) -> ImageTensor:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such image: {path}")
    try:
        pil = Image.open(path)
        pil.load()
    except Exception as exc:
        raise IoError(f"cannot decode PNG {path}: {exc}") from exc
    if pil.mode not in ("L", "RGB"):
        pil = pil.convert("RGB")
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageTensor(data=arr, id=id if id is not None else path.stem)


def write_npybin(image: ImageTensor, path: Path | str) -> None:
    """Raw float32 sidecar: three little-endian uint32 dims, then C-order data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", h, w, c))
        fh.write(image.data.astype("<f4").tobytes(order="C"))


def read_npybin(path: Path | str, id: str | None = None) -> ImageTensor:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such image: {path}")
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) != 12:
            raise IoError(f"truncated header in {path}")
        h, w, c = struct.unpack("<III", header)
        payload = fh.read()
    expected = h * w * c * 4
    if len(payload) != expected:
        raise IoError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return ImageTensor(data=arr, id=id if id is not None else path.stem)


def write_image(image: ImageTensor, path: Path | str) -> None:
    path = Path(path)
    if path.suffix == NPYBIN_SUFFIX:
        write_npybin(image, path)
    elif path.suffix.lower() == ".png":
        write_png(image, path)
    else:
        raise IoError(f"unsupported image format: {path.suffix!r}")


def read_image(path: Path | str, id: str | None = None) -> ImageTensor:
    path = Path(path)
    if path.suffix == NPYBIN_SUFFIX:
        return read_npybin(path, id=id)
    if path.suffix.lower() == ".png":
        return read_png(path, id=id)
    raise IoError(f"unsupported image format: {path.suffix!r}")
