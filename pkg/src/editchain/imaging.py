"""Pixel-level primitives: images, masks, compositing, masked differences,
resizing, and the PNG codec.

Images are immutable 8-bit RGB buffers identified by a content digest of
their pixel bytes and dimensions. Masks are aligned boolean grids. All
operations are pure functions; everything here is safe to share across
threads.
"""

from __future__ import annotations

import hashlib
import io
import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, EmptyList, UnsupportedFormat
from .taxonomy import AttributeKind


def _frozen_array(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class FaceImage:
    """Row-major RGB image, 8 bits per channel, immutable after construction."""

    width: int
    height: int
    pixels: np.ndarray  # shape (height, width, 3), uint8, read-only

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FaceImage":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
        h, w = arr.shape[:2]
        return cls(width=w, height=h, pixels=_frozen_array(arr))

    @cached_property
    def content_id(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"{self.width}x{self.height}:".encode("ascii"))
        digest.update(self.pixels.tobytes())
        return digest.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FaceImage):
            return NotImplemented
        return self.content_id == other.content_id

    def __hash__(self) -> int:
        return hash(self.content_id)

    def __repr__(self) -> str:
        return f"FaceImage({self.width}x{self.height}, {self.content_id[:10]})"


@dataclass(frozen=True, eq=False)
class RegionMask:
    """One boolean per pixel; true marks the target region."""

    width: int
    height: int
    bits: np.ndarray  # shape (height, width), bool, read-only
    attribute: AttributeKind | None = field(default=None)

    @classmethod
    def from_array(
        cls, bits: np.ndarray, attribute: AttributeKind | None = None
    ) -> "RegionMask":
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise ValueError(f"expected (h, w) mask, got shape {bits.shape}")
        if bits.dtype != np.bool_:
            bits = bits.astype(bool)
        h, w = bits.shape
        return cls(width=w, height=h, bits=_frozen_array(bits), attribute=attribute)

    @classmethod
    def full(
        cls, width: int, height: int, value: bool = True,
        attribute: AttributeKind | None = None,
    ) -> "RegionMask":
        return cls.from_array(np.full((height, width), value, dtype=bool), attribute)

    @property
    def true_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @cached_property
    def content_id(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"mask:{self.width}x{self.height}:".encode("ascii"))
        digest.update(np.packbits(self.bits).tobytes())
        return digest.hexdigest()

    def __repr__(self) -> str:
        label = f", {self.attribute.value}" if self.attribute else ""
        return f"RegionMask({self.width}x{self.height}, {self.true_count} set{label})"


def _require_same_dims(a, b, what: str) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(
            f"{what}: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


class DiffValue(float):
    """A mean-absolute-difference scalar that remembers whether the
    included pixel set was empty (in which case the value is 0 by
    convention, not by measurement)."""

    empty_region: bool

    def __new__(cls, value: float, empty_region: bool = False) -> "DiffValue":
        out = super().__new__(cls, value)
        out.empty_region = empty_region
        return out


def composite(base: FaceImage, edited: FaceImage, mask: RegionMask) -> FaceImage:
    """Hard per-pixel selection: edited where the mask is true, base elsewhere.

    No blending; the mask is strictly binary.
    """
    _require_same_dims(base, edited, "base vs edited")
    _require_same_dims(base, mask, "image vs mask")
    out = np.where(mask.bits[:, :, None], edited.pixels, base.pixels)
    return FaceImage.from_array(out.astype(np.uint8))


def masked_mean_abs_diff(
    a: FaceImage, b: FaceImage, exclude: RegionMask | None = None
) -> DiffValue:
    """Mean |a - b| over all channels of all pixels outside `exclude`,
    on the 0-255 scale.

    Returns 0 flagged empty_region when every pixel is excluded. The sum
    is taken in exact integer arithmetic, so constant shifts come back
    exactly.
    """
    _require_same_dims(a, b, "images")
    if exclude is not None:
        _require_same_dims(a, exclude, "image vs exclude mask")
        include = ~exclude.bits
    else:
        include = np.ones((a.height, a.width), dtype=bool)
    count = int(np.count_nonzero(include)) * 3
    if count == 0:
        return DiffValue(0.0, empty_region=True)
    diff = np.abs(a.pixels.astype(np.int16) - b.pixels.astype(np.int16))
    total = int(diff[include].sum(dtype=np.int64))
    return DiffValue(total / count)


def union_masks(masks: list[RegionMask]) -> RegionMask:
    """Per-pixel OR of all masks. The attribute label does not survive:
    a union covers several attributes, so it is cleared."""
    if not masks:
        raise EmptyList("union_masks needs at least one mask")
    first = masks[0]
    acc = np.asarray(first.bits).copy()
    for m in masks[1:]:
        _require_same_dims(first, m, "masks")
        acc |= m.bits
    return RegionMask.from_array(acc, attribute=None)


def resize(img: FaceImage, w: int, h: int) -> FaceImage:
    """Bilinear resize. Identity sizes return the image itself (bit-exact)."""
    if w < 1 or h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {w}x{h}")
    if (w, h) == (img.width, img.height):
        return img
    pil = Image.fromarray(np.asarray(img.pixels), mode="RGB")
    out = pil.resize((w, h), Image.Resampling.BILINEAR)
    return FaceImage.from_array(np.asarray(out, dtype=np.uint8))


# --- PNG codec --------------------------------------------------------------

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _png_header(data: bytes) -> tuple[int, int]:
    """Return (bit_depth, color_type) from the IHDR chunk."""
    if len(data) < 33 or not data.startswith(_PNG_SIGNATURE):
        raise UnsupportedFormat("not a PNG stream")
    length, kind = struct.unpack(">I4s", data[8:16])
    if kind != b"IHDR" or length != 13:
        raise UnsupportedFormat("malformed PNG header")
    bit_depth, color_type = data[24], data[25]
    return bit_depth, color_type


def decode_png(data: bytes) -> FaceImage:
    """Decode an 8-bit RGB or RGBA PNG byte stream.

    RGBA alpha is dropped with a warning; palette images are expanded;
    anything that is not 8 bits per channel is rejected.
    """
    bit_depth, color_type = _png_header(data)
    if bit_depth != 8:
        raise UnsupportedFormat(f"only 8-bit PNGs supported, got bit depth {bit_depth}")
    pil = Image.open(io.BytesIO(data))
    if pil.mode == "P":
        pil = pil.convert("RGBA" if "transparency" in pil.info else "RGB")
    if pil.mode == "RGBA":
        warnings.warn("dropping alpha channel from RGBA image", stacklevel=2)
        pil = pil.convert("RGB")
    elif pil.mode == "L":
        pil = pil.convert("RGB")
    if pil.mode != "RGB":
        raise UnsupportedFormat(f"unsupported PNG mode {pil.mode}")
    return FaceImage.from_array(np.asarray(pil, dtype=np.uint8))


def encode_png(img: FaceImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img.pixels), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_png(path: str | Path) -> FaceImage:
    return decode_png(Path(path).read_bytes())


def save_png(img: FaceImage, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(img))


def decode_mask_png(
    data: bytes, attribute: AttributeKind | None = None
) -> RegionMask:
    """Decode a 1-bit or 8-bit grayscale PNG; any nonzero pixel is true."""
    bit_depth, color_type = _png_header(data)
    if color_type not in (0, 3):  # grayscale or palette
        raise UnsupportedFormat(
            f"masks must be grayscale PNGs, got color type {color_type}"
        )
    if bit_depth not in (1, 8):
        raise UnsupportedFormat(f"masks must be 1- or 8-bit, got {bit_depth}")
    pil = Image.open(io.BytesIO(data)).convert("L")
    return RegionMask.from_array(np.asarray(pil) != 0, attribute=attribute)


def load_mask_png(
    path: str | Path, attribute: AttributeKind | None = None
) -> RegionMask:
    return decode_mask_png(Path(path).read_bytes(), attribute=attribute)


def save_mask_png(mask: RegionMask, path: str | Path) -> None:
    arr = np.where(np.asarray(mask.bits), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path), format="PNG")
