"""Image and mask value types, PNG I/O, cropping and occlusion compositing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

RangeTag = Literal["unit", "signed"]

_RANGES = {"unit": (0.0, 1.0), "signed": (-1.0, 1.0)}


class ImageError(Exception):
    """Base class for image I/O and geometry errors."""


class MissingImageError(ImageError, FileNotFoundError):
    pass


class DecodeError(ImageError):
    pass


class BitDepthError(ImageError):
    pass


class ShapeError(ImageError, ValueError):
    pass


@dataclass(frozen=True)
class ImageTensor:
    """A C x H x W float32 image tagged with its value range."""

    data: np.ndarray
    range_tag: RangeTag = "signed"

    def __post_init__(self):
        if self.range_tag not in _RANGES:
            raise ValueError(f"unknown range tag {self.range_tag!r}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise ShapeError(f"expected 1xHxW or 3xHxW, got {data.shape}")
        lo, hi = _RANGES[self.range_tag]
        if data.size and (data.min() < lo or data.max() > hi):
            raise ValueError(
                f"values [{data.min():.4g}, {data.max():.4g}] outside {self.range_tag} range"
            )
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def to(self, range_tag: RangeTag) -> "ImageTensor":
        if range_tag == self.range_tag:
            return self
        if range_tag == "unit":
            data = (self.data + 1.0) / 2.0
        else:
            data = self.data * 2.0 - 1.0
        lo, hi = _RANGES[range_tag]
        return ImageTensor(np.clip(data, lo, hi), range_tag)

    def to_rgb(self) -> "ImageTensor":
        if self.channels == 3:
            return self
        return ImageTensor(np.repeat(self.data, 3, axis=0), self.range_tag)

    def check_network_shape(self) -> None:
        """Network-facing images need H, W >= 8 and divisible by 4."""
        for side in (self.height, self.width):
            if side < 8 or side % 4:
                raise ShapeError(f"side {side} must be >= 8 and divisible by 4")

    def torch(self) -> torch.Tensor:
        return torch.from_numpy(self.data.copy())


@dataclass(frozen=True)
class BinaryMask:
    """A 1 x H x W mask; 1 marks the occluded region."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] != 1:
            raise ShapeError(f"mask must be 1xHxW, got {data.shape}")
        if not np.all((data == 0.0) | (data == 1.0)):
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def torch(self) -> torch.Tensor:
        return torch.from_numpy(self.data.copy())


def _open_png(path: Path) -> Image.Image:
    if not path.is_file():
        raise MissingImageError(f"no such image: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return img


def load_image(path: str | Path, range_tag: RangeTag = "signed") -> ImageTensor:
    """Decode an 8-bit RGB or grayscale PNG into an ImageTensor."""
    path = Path(path)
    img = _open_png(path)
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode in ("1", "I", "I;16", "I;16B", "I;16L", "F"):
        raise BitDepthError(f"{path}: unsupported bit depth (mode {img.mode})")
    if img.mode not in ("L", "RGB"):
        raise DecodeError(f"{path}: unsupported pixel format {img.mode}")
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    arr = arr / 255.0
    if range_tag == "signed":
        arr = arr * 2.0 - 1.0
    return ImageTensor(np.clip(arr, *_RANGES[range_tag]), range_tag)


def to_uint8(img: ImageTensor) -> np.ndarray:
    """H x W (x 3) uint8 array, rounded to nearest."""
    unit = img.to("unit").data
    arr = np.rint(unit * 255.0).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def save_image(img: ImageTensor, path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(img)).save(path, format="PNG")
    except OSError as exc:
        raise ImageError(f"cannot write {path}: {exc}") from exc


def load_mask(path: str | Path) -> BinaryMask:
    """Single-channel PNG mask: 255 -> 1, 0 -> 0, anything else is an error."""
    path = Path(path)
    img = _open_png(path)
    if img.mode != "L":
        raise DecodeError(f"{path}: mask must be single-channel 8-bit, got {img.mode}")
    arr = np.asarray(img)
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise DecodeError(f"{path}: {int(bad.sum())} mask pixels are neither 0 nor 255")
    return BinaryMask((arr == 255).astype(np.float32)[None])


def save_mask(mask: BinaryMask, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.data[0] * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def resize_crop(
    img: ImageTensor,
    target: int,
    face_box: tuple[int, int, int, int] | None = None,
    allow_upscale: bool = True,
) -> ImageTensor:
    """Crop to ``face_box`` (x0, y0, x1, y1; exclusive ends) or the centred
    largest square, then bilinearly resample to ``target`` x ``target``."""
    if target < 8 or target % 4:
        raise ShapeError(f"target {target} must be >= 8 and divisible by 4")
    h, w = img.height, img.width
    if face_box is None:
        side = min(h, w)
        y0, x0 = (h - side) // 2, (w - side) // 2
        y1, x1 = y0 + side, x0 + side
    else:
        x0, y0, x1, y1 = face_box
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ShapeError(f"face box {face_box} outside {w}x{h} image")
    crop = img.data[:, y0:y1, x0:x1]
    if not allow_upscale and (crop.shape[1] < target or crop.shape[2] < target):
        raise ShapeError(f"crop {crop.shape[2]}x{crop.shape[1]} smaller than target {target}")
    if crop.shape[1:] == (target, target):
        return ImageTensor(crop.copy(), img.range_tag)
    t = torch.from_numpy(np.ascontiguousarray(crop))[None].double()
    out = F.interpolate(t, size=(target, target), mode="bilinear", align_corners=True)
    data = out[0].float().numpy()
    lo, hi = float(crop.min()), float(crop.max())
    return ImageTensor(np.clip(data, lo, hi), img.range_tag)


def apply_occlusion(gt: ImageTensor, mask: BinaryMask, fill: float = -1.0) -> ImageTensor:
    """Replace masked pixels with ``fill``; unmasked pixels are copied exactly."""
    if (gt.height, gt.width) != (mask.height, mask.width):
        raise ShapeError(
            f"image {gt.height}x{gt.width} and mask {mask.height}x{mask.width} differ"
        )
    data = np.where(mask.data == 1.0, np.float32(fill), gt.data)
    return ImageTensor(data, gt.range_tag)
