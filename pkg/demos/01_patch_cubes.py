"""Montage cubes: from a forehead ROI to a stack of overlapping patches.

Builds a small synthetic ROI, slices it into an overlapping patch grid,
and shows the bookkeeping that makes the cube exactly reconstructable:
slice k sits at grid cell (k // cols, k % cols), i.e. top-left pixel
(row * stride, col * stride) of the source image.
"""

import tempfile
from pathlib import Path

import numpy as np

from crease3d import montage

rng = np.random.default_rng(0)

# a tiny custom grid first: 9x9 patches, stride 3, 4x5 grid
cfg = montage.MontageConfig.from_grid(patch_size=9, stride=3,
                                      grid_rows=4, grid_cols=5)
print(f"config: roi {cfg.roi_height}x{cfg.roi_width}, patch {cfg.patch_size}, "
      f"stride {cfg.stride} -> grid {cfg.grid_rows}x{cfg.grid_cols}, "
      f"depth {cfg.expected_depth}")

roi = montage.RoiImage(rng.random((cfg.roi_height, cfg.roi_width, 3),
                                  dtype=np.float32), source_id="demo")
cube = montage.build_cube(roi, cfg)
print(f"cube shape: {cube.data.shape}  (depth, patch, patch, channels)")

# slice 7 of a 5-wide grid lives at grid cell (1, 2)
k = 7
r, c = divmod(k, cfg.grid_cols)
window = roi.pixels[r * cfg.stride:r * cfg.stride + cfg.patch_size,
                    c * cfg.stride:c * cfg.stride + cfg.patch_size]
print(f"slice {k} == roi window at grid cell ({r}, {c}):",
      bool(np.array_equal(cube.data[k], window)))

# neighboring slices share (patch - stride) columns
overlap = cfg.patch_size - cfg.stride
print(f"overlap between slice 0 and slice 1 ({overlap} columns):",
      bool(np.array_equal(cube.data[0][:, cfg.stride:],
                          cube.data[1][:, :overlap])))

# the shipped presets; the 6x10 grid of 170px patches at stride 5 gives
# the 60x170x170x3 cube, cut from a 195x215 ROI
print("\npresets:")
for name, preset in montage.PRESETS.items():
    print(f"  {name:12s} roi {preset.roi_height}x{preset.roi_width}  "
          f"grid {preset.grid_rows}x{preset.grid_cols}  "
          f"cube {preset.cube_shape}")

# arbitrary input sizes are bilinearly resized to the preset ROI first
big = montage.RoiImage(rng.random((300, 400, 3), dtype=np.float32))
resized_cube = montage.image_to_cube(big, montage.PRESETS["cube60x170"])
print(f"\n300x400 image through cube60x170: {resized_cube.data.shape}")

# cubes round-trip through a little binary container with a JSON sidecar
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo.cube"
    montage.save_cube(cube, path)
    back = montage.load_cube(path)
    print("save/load round trip bitwise identical:",
          bool(np.array_equal(cube.data, back.data)))
    print(f"container size: {path.stat().st_size} bytes "
          f"(+ sidecar {path.name}.json)")
