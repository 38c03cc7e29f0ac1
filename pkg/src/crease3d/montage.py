"""Overlapping-patch cube construction.

A cropped region-of-interest (ROI) image is cut into a dense grid of
overlapping square patches which are stacked along a leading depth axis,
turning one still image into a short pseudo-video of shape
``(depth, patch, patch, 3)``.  That cube is the input representation for
the 3D embedding network.

Patches are taken in row-major raster order: slice ``k = row * cols + col``
holds the patch whose top-left corner sits at ``(row * stride, col * stride)``.
Construction is fully deterministic; the same image and config always yield
bitwise-identical cubes.

Cube files use a small documented binary container (see `save_cube`):

    4 x uint32 little-endian  -- shape (depth, height, width, channels)
    4 bytes                   -- dtype tag, currently ``b"f32\\0"``
    payload                   -- row-major (C-order) float32 values

plus a JSON sidecar at ``<path>.json`` carrying source_id, preset_name and
normalization metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidConfig, IoFailure, NonExactGrid, ShapeMismatch

CUBE_DTYPE_TAG = b"f32\x00"
NORMALIZATION = "uint8/255"


def patch_grid_dims(h: int, w: int, p: int, s: int) -> tuple[int, int]:
    """Number of patch rows/cols for an ``h x w`` image, patch ``p``, stride ``s``.

    Raises NonExactGrid unless ``(h - p)`` and ``(w - p)`` divide exactly by
    the stride, so every patch fits without remainder.
    """
    if p > h or p > w:
        raise InvalidConfig(f"patch size {p} exceeds image dims ({h}, {w})")
    if s < 1:
        raise InvalidConfig(f"stride must be >= 1, got {s}")
    if (h - p) % s != 0 or (w - p) % s != 0:
        raise NonExactGrid(
            f"({h}-{p}) and ({w}-{p}) must both divide by stride {s}; "
            "resize the ROI to an exact grid first"
        )
    return (h - p) // s + 1, (w - p) // s + 1


@dataclass(frozen=True)
class MontageConfig:
    """Geometry of the patch grid: ROI size, patch size, stride, depth."""

    roi_height: int
    roi_width: int
    patch_size: int
    stride: int
    expected_depth: int
    preset_name: str = "custom"

    def __post_init__(self):
        rows, cols = patch_grid_dims(
            self.roi_height, self.roi_width, self.patch_size, self.stride
        )
        if rows * cols != self.expected_depth:
            raise InvalidConfig(
                f"grid {rows}x{cols} yields depth {rows * cols}, "
                f"config declares {self.expected_depth}"
            )

    @property
    def grid_rows(self) -> int:
        return (self.roi_height - self.patch_size) // self.stride + 1

    @property
    def grid_cols(self) -> int:
        return (self.roi_width - self.patch_size) // self.stride + 1

    @property
    def cube_shape(self) -> tuple[int, int, int, int]:
        return (self.expected_depth, self.patch_size, self.patch_size, 3)

    @classmethod
    def from_grid(cls, patch_size: int, stride: int, grid_rows: int,
                  grid_cols: int, preset_name: str = "custom") -> "MontageConfig":
        """Derive the canonical ROI size from the desired grid.

        ROI dims are the smallest that realize the grid exactly:
        ``patch + (rows - 1) * stride`` by ``patch + (cols - 1) * stride``.
        """
        return cls(
            roi_height=patch_size + (grid_rows - 1) * stride,
            roi_width=patch_size + (grid_cols - 1) * stride,
            patch_size=patch_size,
            stride=stride,
            expected_depth=grid_rows * grid_cols,
            preset_name=preset_name,
        )

    def to_dict(self) -> dict:
        return {
            "roi_height": self.roi_height,
            "roi_width": self.roi_width,
            "patch_size": self.patch_size,
            "stride": self.stride,
            "expected_depth": self.expected_depth,
            "preset_name": self.preset_name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MontageConfig":
        return cls(**d)


# Shipped grids.  cube60x170 reproduces the 60x170x170x3 input tensor;
# cube80x224 is the grid whose downstream five-block feature shapes match
# the full network's reference plan (see netspec.REFERENCE_BLOCK_SHAPES);
# cube16x64 is a small grid for desk-scale experiments.
PRESETS: dict[str, MontageConfig] = {
    "cube60x170": MontageConfig.from_grid(170, 5, 6, 10, "cube60x170"),
    "cube80x224": MontageConfig.from_grid(224, 5, 8, 10, "cube80x224"),
    "cube16x64": MontageConfig.from_grid(64, 5, 4, 4, "cube16x64"),
}


@dataclass(frozen=True)
class RoiImage:
    """A cropped forehead ROI: float32 ``(H, W, 3)`` pixels in [0, 1]."""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeMismatch(f"expected (H, W, 3) pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeMismatch("empty image")
        if float(px.min()) < 0.0 or float(px.max()) > 1.0:
            raise InvalidConfig("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class MontageCube:
    """Stacked patches: float32 ``(depth, patch, patch, 3)`` in [0, 1]."""

    data: np.ndarray
    config: MontageConfig
    source_id: str = ""

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.shape != self.config.cube_shape:
            raise ShapeMismatch(
                f"cube shape {arr.shape} != config shape {self.config.cube_shape}"
            )
        object.__setattr__(self, "data", arr)

    @property
    def depth(self) -> int:
        return self.data.shape[0]


def normalize_pixels(raw: np.ndarray) -> np.ndarray:
    """uint8 image -> float32 in [0, 1] (divide by 255)."""
    return np.asarray(raw, dtype=np.float32) / 255.0


def load_roi(path: str | Path, source_id: str | None = None) -> RoiImage:
    """Read an 8-bit image file as a normalized RGB ROI."""
    path = Path(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return RoiImage(normalize_pixels(arr), source_id or str(path))


def _bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resampling with edge clamping."""
    in_h, in_w = pixels.shape[:2]
    src = pixels.astype(np.float64)

    yc = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xc = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.floor(yc).astype(np.int64)
    x0 = np.floor(xc).astype(np.int64)
    wy = (yc - y0)[:, None, None]
    wx = (xc - x0)[None, :, None]
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)

    top = src[y0c][:, x0c] * (1.0 - wx) + src[y0c][:, x1c] * wx
    bot = src[y1c][:, x0c] * (1.0 - wx) + src[y1c][:, x1c] * wx
    out = top * (1.0 - wy) + bot * wy
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_roi(img: RoiImage, cfg: MontageConfig) -> RoiImage:
    """Resample an ROI to the config's canonical dims.

    Returns the input pixels unchanged (byte-identical copy) when the image
    is already at the target size.
    """
    target = (cfg.roi_height, cfg.roi_width)
    if (img.height, img.width) == target:
        return RoiImage(img.pixels.copy(), img.source_id)
    out = _bilinear_resize(img.pixels, cfg.roi_height, cfg.roi_width)
    return RoiImage(out, img.source_id)


def build_cube(img: RoiImage, cfg: MontageConfig) -> MontageCube:
    """Stack the overlapping patch grid of ``img`` into a cube.

    The image must already be at the config's ROI dims (use `resize_roi`);
    raises ShapeMismatch otherwise.
    """
    if (img.height, img.width) != (cfg.roi_height, cfg.roi_width):
        raise ShapeMismatch(
            f"image dims ({img.height}, {img.width}) != "
            f"config ROI ({cfg.roi_height}, {cfg.roi_width})"
        )
    rows, cols = patch_grid_dims(
        cfg.roi_height, cfg.roi_width, cfg.patch_size, cfg.stride
    )
    p, s = cfg.patch_size, cfg.stride
    windows = np.lib.stride_tricks.sliding_window_view(img.pixels, (p, p), axis=(0, 1))
    grid = windows[::s, ::s]                    # (rows, cols, 3, p, p)
    grid = np.transpose(grid, (0, 1, 3, 4, 2))  # (rows, cols, p, p, 3)
    data = np.ascontiguousarray(grid.reshape(rows * cols, p, p, 3))
    return MontageCube(data, cfg, img.source_id)


def image_to_cube(img: RoiImage, cfg: MontageConfig) -> MontageCube:
    """resize_roi followed by build_cube."""
    return build_cube(resize_roi(img, cfg), cfg)


def save_cube(cube: MontageCube, path: str | Path, extra_meta: dict | None = None) -> Path:
    """Write the binary cube container plus its JSON sidecar.

    Layout: 4 little-endian uint32 shape fields, a 4-byte dtype tag
    (``b"f32\\0"``), then the row-major float32 payload.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d, h, w, c = cube.data.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4I", d, h, w, c))
        f.write(CUBE_DTYPE_TAG)
        f.write(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
    meta = {
        "source_id": cube.source_id,
        "preset_name": cube.config.preset_name,
        "normalization": NORMALIZATION,
        "montage_config": cube.config.to_dict(),
    }
    if extra_meta:
        meta.update(extra_meta)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_cube(path: str | Path) -> MontageCube:
    """Read a cube container written by `save_cube`."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20:
        raise IoFailure(f"{path}: truncated cube header")
    d, h, w, c = struct.unpack("<4I", raw[:16])
    tag = raw[16:20]
    if tag != CUBE_DTYPE_TAG:
        raise InvalidConfig(f"{path}: unknown dtype tag {tag!r}")
    expected = d * h * w * c * 4
    payload = raw[20:]
    if len(payload) != expected:
        raise ShapeMismatch(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w, c).copy()

    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text())
    cfg = MontageConfig.from_dict(meta["montage_config"])
    return MontageCube(data, cfg, meta.get("source_id", ""))
