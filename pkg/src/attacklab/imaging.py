"""Images, image file formats, resizing, and the caption gallery.

Pixels live in [0, 1] as float64, channel-last. Two interchange
formats:

* binary PPM (P6): 8-bit, quantized with round-half-up
  (``floor(v * maxval + 0.5)``); loads of saved PPMs round-trip bitwise
  because loaded pixels sit exactly on the ``k / maxval`` grid.
* a float sidecar (.f64): one-line JSON header plus raw little-endian
  float64 pixels. Lossless, used for adversarial examples whose
  sub-1/255 structure 8-bit quantization would destroy.

The gallery maps captions to images; target synthesis is deterministic
nearest-caption retrieval under a toy text encoder, standing in for a
text-to-image model behind the same interface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, FormatError

SIDECAR_FORMAT = "attacklab-image-f64-v1"


class Image:
    """Validated H x W x 3 pixel grid with values in [0, 1]."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        arr = np.array(pixels, dtype=np.float64, order="C")
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError(f"image must be (H, W, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("image contains non-finite pixels")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractError(
                f"pixels outside [0, 1]: min {arr.min():.6g}, max {arr.max():.6g}")
        arr.flags.writeable = False
        self.pixels = arr

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def to_tensor(self, requires_grad: bool = False) -> T.Tensor:
        return T.Tensor(self.pixels, requires_grad=requires_grad)

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"Image({self.height}x{self.width})"


# -- PPM (P6) -------------------------------------------------------------------

def _read_ppm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos: pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos: pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"truncated PPM header at byte {pos}")
    start = pos
    while pos < n and not buf[pos: pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def load_ppm(path) -> Image:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise FormatError(f"not a binary PPM (magic {buf[:2]!r}) at byte 0")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_ppm_token(buf, pos)
        if not token.isdigit():
            raise FormatError(f"non-numeric PPM header field {token!r} at byte {pos}")
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad PPM dimensions {width}x{height} at byte {pos}")
    if not 1 <= maxval <= 255:
        raise FormatError(f"unsupported PPM maxval {maxval} at byte {pos}")
    pos += 1  # single whitespace after maxval
    expected = width * height * 3
    raster = buf[pos: pos + expected]
    if len(raster) != expected:
        raise FormatError(
            f"PPM raster truncated: expected {expected} bytes at byte {pos}, "
            f"got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / maxval
    return Image(arr.reshape(height, width, 3))


def save_ppm(img: Image, path) -> None:
    """Quantize to 8 bits with round-half-up and write binary PPM."""
    q = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(q.tobytes(order="C"))


# -- float sidecar ----------------------------------------------------------------

def load_sidecar(path) -> Image:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable sidecar header in {path}: {exc}") from exc
    if header.get("format") != SIDECAR_FORMAT:
        raise FormatError(f"unknown sidecar format {header.get('format')!r}")
    h, w = int(header["height"]), int(header["width"])
    expected = h * w * 3 * 8
    if len(blob) != expected:
        raise FormatError(
            f"sidecar raster truncated: expected {expected} bytes "
            f"after header, got {len(blob)}")
    arr = np.frombuffer(blob, dtype="<f8").reshape(h, w, 3)
    return Image(arr)


def save_sidecar(img: Image, path) -> None:
    header = {"format": SIDECAR_FORMAT, "height": img.height,
              "width": img.width, "channels": 3, "dtype": "<f8"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(img.pixels.astype("<f8").tobytes(order="C"))


def load_image(path) -> Image:
    """Dispatch on extension: .ppm, .f64 sidecar, or .png (via Pillow)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return load_ppm(path)
    if suffix == ".f64":
        return load_sidecar(path)
    if suffix == ".png":
        try:
            from PIL import Image as PILImage
        except ImportError as exc:  # pragma: no cover
            raise DataError("PNG support requires Pillow") from exc
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return Image(arr)
    raise DataError(f"unsupported image extension {suffix!r} for {path}")


def save_image(img: Image, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        save_ppm(img, path)
    elif suffix == ".f64":
        save_sidecar(img, path)
    else:
        raise DataError(f"unsupported image extension {suffix!r} for {path}")


# -- resize ------------------------------------------------------------------------

def resize(img: Image, height: int, width: int) -> Image:
    """Bilinear resample with half-pixel centers.

    Source coordinate of output pixel i is (i + 0.5) * scale - 0.5;
    edge samples clamp to the border. Resizing to the same dimensions
    reproduces the input bitwise.
    """
    if height < 1 or width < 1:
        raise ContractError(f"target size must be positive, got {height}x{width}")
    src = img.pixels
    sh, sw = src.shape[0], src.shape[1]

    def axis_coords(out_n, src_n):
        pos = (np.arange(out_n) + 0.5) * (src_n / out_n) - 0.5
        lo = np.clip(np.floor(pos), 0, src_n - 1).astype(np.intp)
        hi = np.minimum(lo + 1, src_n - 1)
        frac = np.clip(pos - lo, 0.0, 1.0)
        return lo, hi, frac

    y0, y1, fy = axis_coords(height, sh)
    x0, x1, fx = axis_coords(width, sw)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[np.ix_(y0, x0)] * (1.0 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1.0 - fx) + src[np.ix_(y1, x1)] * fx
    out = top * (1.0 - fy) + bot * fy
    return Image(np.clip(out, 0.0, 1.0))


# -- gallery -------------------------------------------------------------------------

@dataclass(frozen=True)
class GalleryEntry:
    caption: str
    path: str


class Gallery:
    """Caption-indexed image store used to 'reverse' target text into a
    target image by nearest-caption retrieval."""

    def __init__(self, entries: list[GalleryEntry], images: list[Image],
                 text_encoder, image_size: int = 32):
        if len(entries) < 2:
            raise ConfigError(f"gallery needs at least 2 entries, got {len(entries)}")
        captions = [e.caption for e in entries]
        if any(not c.strip() for c in captions):
            raise ConfigError("gallery captions must be non-empty")
        if len(set(captions)) != len(captions):
            raise ConfigError("gallery captions must be unique")
        self.entries = entries
        self.images = images
        self.image_size = image_size
        self._encoder = text_encoder
        self._index = np.stack([
            self._unit_embedding(c) for c in captions])

    def _unit_embedding(self, text: str) -> np.ndarray:
        return T.l2_normalize(self._encoder.embed(text)).data

    @classmethod
    def from_manifest(cls, manifest_path, text_encoder, image_size: int = 32) -> "Gallery":
        manifest_path = Path(manifest_path)
        try:
            raw = json.loads(manifest_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read gallery manifest {manifest_path}: {exc}") from exc
        if not isinstance(raw, list):
            raise DataError("gallery manifest must be a JSON list of {caption, path}")
        entries, images = [], []
        for item in raw:
            caption, rel = item.get("caption"), item.get("path")
            if not caption or not rel:
                raise DataError(f"gallery manifest entry missing caption/path: {item}")
            path = manifest_path.parent / rel
            entries.append(GalleryEntry(caption=caption, path=str(path)))
            images.append(load_image(path))
        return cls(entries, images, text_encoder, image_size=image_size)

    def __len__(self) -> int:
        return len(self.entries)

    def caption_scores(self, target_text: str) -> np.ndarray:
        """Cosine similarity of the target text to every gallery caption."""
        q = self._unit_embedding(target_text)
        return self._index @ q

    def retrieve_index(self, target_text: str) -> int:
        """Best-matching entry; ties break toward the lowest index."""
        return int(np.argmax(self.caption_scores(target_text)))


def synthesize_target(gallery: Gallery, target_text: str) -> Image:
    """Target image for a target text: retrieve the gallery image whose
    caption embeds closest to the text, resized to the model resolution."""
    idx = gallery.retrieve_index(target_text)
    img = gallery.images[idx]
    return resize(img, gallery.image_size, gallery.image_size)
