"""Turn images into FFN-sized patches.

Images are float arrays ``[H, W, 3]``. Grayscale inputs (``[H, W]`` or
``[H, W, 1]``) are replicated to three channels. All resizing is bilinear.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from skimage.transform import resize as _sk_resize

from ffnet.errors import EmptyImage

PATCH_SIZES = (16, 32, 96)
SCALES = (1, 2, 4)


def to_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.size == 0:
        raise EmptyImage("image has no pixels")
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3:
        raise ValueError(f"expected [H, W] or [H, W, C] image, got shape {image.shape}")
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    elif image.shape[2] == 4:
        image = image[..., :3]
    elif image.shape[2] != 3:
        raise ValueError(f"unsupported channel count {image.shape[2]}")
    return image


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize without anti-aliasing; identity when the size matches."""
    image = np.asarray(image)
    if image.size == 0:
        raise EmptyImage("image has no pixels")
    if image.shape[:2] == (height, width):
        return image.copy()
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32
    out = _sk_resize(
        image.astype(np.float64),
        (height, width) + image.shape[2:],
        order=1,
        mode="edge",
        anti_aliasing=False,
        preserve_range=True,
    )
    return out.astype(dtype)


def nearest_patch_size(height: int, width: int, allowed: Sequence[int] = PATCH_SIZES) -> int:
    """Allowed size closest to the longer side; ties go to the larger size."""
    side = max(height, width)
    return min(sorted(allowed), key=lambda p: (abs(side - p), -p))


def resize_nearest_patch(image: np.ndarray, allowed: Sequence[int] = PATCH_SIZES) -> np.ndarray:
    image = np.asarray(image)
    if image.size == 0:
        raise EmptyImage("image has no pixels")
    p = nearest_patch_size(image.shape[0], image.shape[1], allowed)
    return resize(image, p, p)


@dataclass
class PatchSet:
    patches: list[np.ndarray]
    indices: list[tuple[int, int, int]]  # (y, x, scale)
    patch_size: int
    source: str = ""
    # padded (H, W) of the image tiled at each scale
    padded_shapes: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patches)

    def stack(self) -> np.ndarray:
        return np.stack(self.patches) if self.patches else np.empty((0, self.patch_size, self.patch_size, 3))


def pad_to_multiple(image: np.ndarray, p: int, fill: float = 0.0) -> np.ndarray:
    h, w = image.shape[:2]
    ph, pw = -h % p, -w % p
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), constant_values=fill)


def tile(image: np.ndarray, p: int, fill: float = 0.0, scale: int = 1, source: str = "") -> PatchSet:
    """Row-major non-overlapping ``p x p`` tiles, padding bottom/right with ``fill``."""
    image = pad_to_multiple(to_rgb(image), p, fill)
    h, w = image.shape[:2]
    patches, indices = [], []
    for y in range(h // p):
        for x in range(w // p):
            patches.append(image[y * p : (y + 1) * p, x * p : (x + 1) * p].copy())
            indices.append((y, x, scale))
    return PatchSet(patches, indices, p, source, {scale: (h, w)})


def untile(patches: PatchSet, scale: int = 1) -> np.ndarray:
    """Reassemble the padded image of one scale from its tiles."""
    h, w = patches.padded_shapes[scale]
    p = patches.patch_size
    out = np.zeros((h, w, 3), dtype=patches.patches[0].dtype)
    for patch, (y, x, s) in zip(patches.patches, patches.indices):
        if s == scale:
            out[y * p : (y + 1) * p, x * p : (x + 1) * p] = patch
    return out


def downscale(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return image
    h, w = image.shape[:2]
    return resize(image, math.ceil(h / factor), math.ceil(w / factor))


def multiscale(image: np.ndarray, p: int = 32, scales: Sequence[int] = SCALES, fill: float = 0.0, source: str = "") -> PatchSet:
    """Tiles of the image at full resolution and downscaled by each factor."""
    image = to_rgb(image)
    result = PatchSet([], [], p, source)
    for s in scales:
        part = tile(downscale(image, s), p, fill, scale=s)
        result.patches += part.patches
        result.indices += part.indices
        result.padded_shapes.update(part.padded_shapes)
    return result


def expected_patch_count(height: int, width: int, p: int = 32, scales: Sequence[int] = SCALES) -> int:
    return sum(math.ceil(height / (s * p)) * math.ceil(width / (s * p)) for s in scales)


@dataclass(frozen=True)
class CanvasSpec:
    short_side: int = 128
    long_side: int = 256
    fill: float = 0.0

    def __post_init__(self):
        if not 0 < self.short_side <= self.long_side:
            raise ValueError("canvas needs 0 < short_side <= long_side")


def text_canvas(image: np.ndarray, canvas: CanvasSpec = CanvasSpec()) -> np.ndarray:
    """Fit the image, aspect preserved, into a landscape (or portrait) canvas.

    Square and landscape images go on a ``short x long`` canvas, portrait
    images on ``long x short``. The scaled image is centred; the rest is fill.
    """
    image = to_rgb(image)
    h, w = image.shape[:2]
    ch, cw = (canvas.long_side, canvas.short_side) if h > w else (canvas.short_side, canvas.long_side)
    s = min(ch / h, cw / w)
    nh, nw = min(ch, max(1, round(h * s))), min(cw, max(1, round(w * s)))
    scaled = resize(image, nh, nw)
    out = np.full((ch, cw, 3), canvas.fill, dtype=scaled.dtype)
    top, left = (ch - nh) // 2, (cw - nw) // 2
    out[top : top + nh, left : left + nw] = scaled
    return out


# ------------------------------------------------------------------------ I/O


def read_image(path: str | Path) -> np.ndarray:
    """Read a PPM/PGM (or any Pillow-readable raster) as floats in ``[0, 1]``."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.size == 0:
        raise EmptyImage(f"{path} has no pixels")
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return to_rgb(arr.astype(np.float32) / scale)


def write_patchset(patches: PatchSet, out_dir: str | Path) -> Path:
    """Save each patch as ``.npy`` and a ``manifest.csv`` of ``file,y,x,scale``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "y", "x", "scale"])
        for n, (patch, (y, x, s)) in enumerate(zip(patches.patches, patches.indices)):
            name = f"patch_{n:05d}_s{s}_y{y}_x{x}.npy"
            np.save(out_dir / name, patch)
            writer.writerow([name, y, x, s])
    return manifest


def read_patchset(out_dir: str | Path) -> PatchSet:
    out_dir = Path(out_dir)
    patches, indices = [], []
    with (out_dir / "manifest.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            patches.append(np.load(out_dir / row["file"]))
            indices.append((int(row["y"]), int(row["x"]), int(row["scale"])))
    p = patches[0].shape[0] if patches else 0
    return PatchSet(patches, indices, p, str(out_dir))
