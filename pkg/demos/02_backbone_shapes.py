"""Backbone geometry: analytic shape plans, parameter counts, live forwards.

The network is declared as data (conv / pool / branch-group specs), so every
block's output shape and the exact trainable parameter count fall out of
arithmetic before any weights exist.  The full five-block architecture has a
reference shape table that an 80x224x224x3 cube realizes exactly; smaller
inputs are legal but drift from it, and `ShapePlan.divergence` says where.
"""

import numpy as np
import torch

from crease3d import netspec, network

torch.set_num_threads(1)

# --- the full architecture, on paper only -------------------------------
cfg = netspec.full_backbone_config()
plan = netspec.shape_plan(cfg)
print(f"full backbone on input {cfg.input_shape}:")
for name, shape in zip(plan.block_names, plan.block_shapes):
    print(f"  {name}: {shape}")
print(f"  global average pool -> ({plan.embedding_dim},)")
print(f"matches reference table: {plan.divergence(netspec.REFERENCE_BLOCK_SHAPES) == []}")
print(f"trainable parameters: {netspec.count_params(cfg):,}")

# feeding the 60x170x170x3 preset cube instead is legal but lands off the
# reference table from block 1 on
alt = netspec.shape_plan(netspec.full_backbone_config((60, 170, 170, 3)))
print("\nsame blocks on a 60x170x170x3 cube:")
for name, planned, ref in alt.divergence(netspec.REFERENCE_BLOCK_SHAPES):
    print(f"  {name}: {planned}  (reference {ref})")

# the desk-scale variants keep the block style but shrink everything
for name in ("reduced", "tiny"):
    c = netspec.BACKBONE_BUILDERS[name]()
    print(f"\n{name}: input {c.input_shape}, {len(c.blocks)} blocks, "
          f"embedding {c.embedding_dim}, params {netspec.count_params(c):,}")

# --- instantiate the reduced net and push cubes through it --------------
# verify_block_shapes runs a real forward and raises unless every block
# output agrees with the analytic plan
backbone = network.build_backbone(netspec.reduced_backbone_config(), seed=0)
observed = network.verify_block_shapes(backbone)
print(f"\nreduced net verified block shapes: {observed}")

head_cfg = netspec.HEAD_PRESETS["reduced"]
head = network.build_head(head_cfg, seed=1)

rng = np.random.default_rng(0)
cubes = rng.random((4, 16, 64, 64, 3), dtype=np.float32)
feats = network.backbone_forward(backbone, cubes)
final = network.embed_cubes(backbone, head, cubes)
print(f"4 cubes -> backbone {feats.shape} -> head {final.shape}")
print(f"output norms: {np.linalg.norm(final, axis=1)}")
print(f"head FC parameters: {netspec.head_param_count(head_cfg):,}")
