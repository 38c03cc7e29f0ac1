"""Declarative description of the 3D embedding network.

The backbone is specified as data (conv/pool/branch-group specs) so that
output shapes and parameter counts can be computed analytically, without
instantiating any weights.  `network.build_backbone` turns a
`BackboneConfig` into a torch module whose per-block outputs must match
`shape_plan` exactly.

Kernel and stride triples are ordered ``(temporal, height, width)``.
"same" padding pads each axis by ``kernel // 2`` (odd kernels only), so the
output extent is ``ceil(input / stride)``.

The full five-block architecture mixes plain two-branch blocks with chains
of inception-style modules (four parallel branches merged by channel
concatenation).  Its intended per-block output shapes for an 80x224x224x3
cube are recorded in `REFERENCE_BLOCK_SHAPES`; `ShapePlan.divergence`
reports where a given input size deviates from that reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

from .errors import InvalidConfig

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class ConvSpec:
    """A 3D convolution (+ rectifier) inside a block."""

    out_channels: int
    kernel: Triple
    stride: Triple = (1, 1, 1)
    padding: Union[str, Triple] = "same"

    def __post_init__(self):
        if self.out_channels < 1:
            raise InvalidConfig("out_channels must be >= 1")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise InvalidConfig(f"kernel/stride entries must be >= 1: {self}")
        if self.padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise InvalidConfig("'same' padding requires odd kernels")

    def pad(self) -> Triple:
        if self.padding == "same":
            return tuple(k // 2 for k in self.kernel)
        return tuple(self.padding)


@dataclass(frozen=True)
class PoolSpec:
    """A 3D max/avg pooling stage."""

    kernel: Triple = (3, 3, 3)
    stride: Triple = (2, 2, 2)
    padding: Union[str, Triple] = "same"
    kind: str = "max"

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise InvalidConfig(f"unknown pool kind {self.kind!r}")
        if self.padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise InvalidConfig("'same' padding requires odd kernels")

    def pad(self) -> Triple:
        if self.padding == "same":
            return tuple(k // 2 for k in self.kernel)
        return tuple(self.padding)


LayerSpec = Union[ConvSpec, PoolSpec]


@dataclass(frozen=True)
class BranchGroupSpec:
    """Parallel branches over the same input, merged by channel concat."""

    name: str
    branches: tuple[tuple[LayerSpec, ...], ...]
    merge: str = "concat-channels"

    def __post_init__(self):
        if self.merge != "concat-channels":
            raise InvalidConfig(f"unsupported merge {self.merge!r}")
        if not self.branches:
            raise InvalidConfig(f"branch group {self.name!r} has no branches")


StageSpec = Union[LayerSpec, BranchGroupSpec]


@dataclass(frozen=True)
class BlockSpec:
    """A named sequence of stages (layers and/or branch groups)."""

    name: str
    stages: tuple[StageSpec, ...]


@dataclass(frozen=True)
class BackboneConfig:
    """Input geometry plus the ordered block list.

    ``input_shape`` is ``(depth, height, width, channels)`` of the cube;
    ``embedding_dim`` must equal the channel count after the last block
    (global average pooling turns channels into the embedding).
    """

    input_shape: tuple[int, int, int, int]
    blocks: tuple[BlockSpec, ...]
    embedding_dim: int
    name: str = "custom"

    def __post_init__(self):
        plan = shape_plan(self)
        if plan.embedding_dim != self.embedding_dim:
            raise InvalidConfig(
                f"declared embedding_dim {self.embedding_dim} != "
                f"final channel count {plan.embedding_dim}"
            )


@dataclass(frozen=True)
class HeadConfig:
    """Two fully connected layers producing the final unit-norm embedding."""

    in_dim: int = 1024
    fc1_units: int = 1024
    fc2_units: int = 512
    activation: str = "relu"
    output_normalized: bool = True

    def __post_init__(self):
        if min(self.in_dim, self.fc1_units, self.fc2_units) < 1:
            raise InvalidConfig("head layer sizes must be >= 1")
        if self.activation != "relu":
            raise InvalidConfig(f"unsupported activation {self.activation!r}")


@dataclass(frozen=True)
class ShapePlan:
    """Analytic per-block output shapes ``(t, h, w, c)`` plus embedding size."""

    input_shape: tuple[int, int, int, int]
    block_names: tuple[str, ...]
    block_shapes: tuple[tuple[int, int, int, int], ...]
    embedding_dim: int

    def stage_shapes(self) -> list[tuple[int, ...]]:
        """Per-block shapes plus the flat post-GAP shape, in forward order."""
        return [*self.block_shapes, (self.embedding_dim,)]

    def divergence(
        self, reference: tuple[tuple[int, int, int, int], ...]
    ) -> list[tuple[str, tuple, tuple]]:
        """Blocks whose planned shape differs from a reference shape table.

        Returns ``[(block_name, planned, reference), ...]``; empty when the
        plan realizes the reference exactly.  Length mismatches are reported
        with a ``None`` placeholder on the missing side.
        """
        out = []
        n = max(len(self.block_shapes), len(reference))
        for i in range(n):
            name = self.block_names[i] if i < len(self.block_names) else f"block{i + 1}"
            planned = self.block_shapes[i] if i < len(self.block_shapes) else None
            ref = reference[i] if i < len(reference) else None
            if planned != ref:
                out.append((name, planned, ref))
        return out


def _axis_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _layer_out(shape: tuple, spec: LayerSpec, where: str) -> tuple:
    t, h, w, c = shape
    pad = spec.pad()
    dims = tuple(
        _axis_out(n, k, s, p)
        for n, k, s, p in zip((t, h, w), spec.kernel, spec.stride, pad)
    )
    if any(d < 1 for d in dims):
        raise InvalidConfig(f"{where}: non-positive output extent {dims} from {shape}")
    c_out = spec.out_channels if isinstance(spec, ConvSpec) else c
    return (*dims, c_out)


def _stage_out(shape: tuple, stage: StageSpec, where: str) -> tuple:
    if isinstance(stage, BranchGroupSpec):
        outs = []
        for bi, branch in enumerate(stage.branches):
            s = shape
            for li, layer in enumerate(branch):
                s = _layer_out(s, layer, f"{where}/{stage.name}[{bi}][{li}]")
            outs.append(s)
        spatial = {o[:3] for o in outs}
        if len(spatial) != 1:
            raise InvalidConfig(
                f"{where}/{stage.name}: branch outputs disagree on (t,h,w): "
                f"{sorted(spatial)}"
            )
        return (*outs[0][:3], sum(o[3] for o in outs))
    return _layer_out(shape, stage, where)


def shape_plan(cfg: BackboneConfig) -> ShapePlan:
    """Compute every block's output shape without instantiating weights."""
    if len(cfg.input_shape) != 4 or any(d < 1 for d in cfg.input_shape):
        raise InvalidConfig(f"bad input shape {cfg.input_shape}")
    t, h, w, c = cfg.input_shape
    shape = (t, h, w, c)
    names, shapes = [], []
    for block in cfg.blocks:
        for stage in block.stages:
            shape = _stage_out(shape, stage, block.name)
        names.append(block.name)
        shapes.append(shape)
    return ShapePlan(
        input_shape=cfg.input_shape,
        block_names=tuple(names),
        block_shapes=tuple(shapes),
        embedding_dim=shape[3],
    )


def _conv_params(spec: ConvSpec, in_c: int) -> int:
    k = spec.kernel
    return k[0] * k[1] * k[2] * in_c * spec.out_channels + spec.out_channels


def count_params(cfg: BackboneConfig) -> int:
    """Exact trainable parameter count (conv weights + biases); pools are free."""
    total = 0
    c = cfg.input_shape[3]
    for block in cfg.blocks:
        for stage in block.stages:
            if isinstance(stage, BranchGroupSpec):
                c_out = 0
                for branch in stage.branches:
                    bc = c
                    for layer in branch:
                        if isinstance(layer, ConvSpec):
                            total += _conv_params(layer, bc)
                            bc = layer.out_channels
                    c_out += bc
                c = c_out
            elif isinstance(stage, ConvSpec):
                total += _conv_params(stage, c)
                c = stage.out_channels
    return total


def head_param_count(cfg: HeadConfig) -> int:
    """Parameters of the two FC layers (weights + biases)."""
    return (cfg.in_dim * cfg.fc1_units + cfg.fc1_units
            + cfg.fc1_units * cfg.fc2_units + cfg.fc2_units)


# ---------------------------------------------------------------------------
# Shipped architectures
# ---------------------------------------------------------------------------

def inception_module(
    name: str,
    c0: int,
    c1r: int,
    c1: int,
    c2r: int,
    c2: int,
    cp: int,
    kernel: Triple = (3, 3, 3),
) -> BranchGroupSpec:
    """Four-branch inception module: 1x1x1 / reduce+conv / reduce+conv / pool+proj.

    Output channels = c0 + c1 + c2 + cp.
    """
    one = (1, 1, 1)
    return BranchGroupSpec(
        name=name,
        branches=(
            (ConvSpec(c0, one),),
            (ConvSpec(c1r, one), ConvSpec(c1, kernel)),
            (ConvSpec(c2r, one), ConvSpec(c2, kernel)),
            (PoolSpec(kernel=(3, 3, 3), stride=(1, 1, 1)), ConvSpec(cp, one)),
        ),
    )


def _spatial_halving_pool() -> PoolSpec:
    # Halves height/width, keeps the temporal extent.
    return PoolSpec(kernel=(1, 3, 3), stride=(1, 2, 2))


def _full_halving_pool() -> PoolSpec:
    # Halves all three extents.
    return PoolSpec(kernel=(3, 3, 3), stride=(2, 2, 2))


# Intended per-block output shapes of the full architecture, realized
# exactly by an 80x224x224x3 input cube.
REFERENCE_BLOCK_SHAPES: tuple[tuple[int, int, int, int], ...] = (
    (40, 56, 56, 64),
    (40, 28, 28, 162),
    (40, 14, 14, 480),
    (20, 7, 7, 832),
    (10, 4, 4, 1024),
)
FULL_EMBEDDING_DIM = 1024

# Per-module channel allocations (c0, c1r, c1, c2r, c2, cp) for the
# inception chains of blocks 3-5; block outputs end at 480 / 832 / 1024.
_BLOCK3_MODULES = (
    ("block3_m1", 64, 96, 128, 16, 32, 32),    # -> 256
    ("block3_m2", 128, 128, 192, 32, 96, 64),  # -> 480
)
_BLOCK4_MODULES = (
    ("block4_m1", 192, 96, 208, 16, 48, 64),    # -> 512
    ("block4_m2", 160, 112, 224, 24, 64, 64),   # -> 512
    ("block4_m3", 128, 128, 256, 24, 64, 64),   # -> 512
    ("block4_m4", 112, 144, 288, 32, 64, 64),   # -> 528
    ("block4_m5", 256, 160, 320, 32, 128, 128),  # -> 832
)
_BLOCK5_MODULES = (
    ("block5_m1", 256, 160, 320, 32, 128, 128),  # -> 832
    ("block5_m2", 384, 192, 384, 48, 128, 128),  # -> 1024
)


def full_backbone_config(
    input_shape: tuple[int, int, int, int] = (80, 224, 224, 3),
) -> BackboneConfig:
    """The five-block embedding backbone.

    Block 1 stem: a strided (7,3,7) conv pair in branch_0, a pooled 1x1x1
    projection in branch_1, merged to 64 channels, then a spatial pool.
    Block 2 pairs a (3,3,7) path against a (3,7,3) path (81 + 81 = 162
    channels).  Blocks 3-5 chain inception modules ending at 480, 832 and
    1024 channels; blocks 4 and 5 halve all extents on entry.  Global
    average pooling yields the 1024-dim embedding.
    """
    one = (1, 1, 1)
    block1 = BlockSpec(
        name="block1",
        stages=(
            BranchGroupSpec(
                name="block1_branches",
                branches=(
                    (
                        ConvSpec(32, (7, 3, 7), stride=(2, 2, 2)),
                        ConvSpec(32, (7, 3, 7)),
                    ),
                    (
                        PoolSpec(kernel=(3, 3, 3), stride=(2, 2, 2)),
                        ConvSpec(32, one),
                    ),
                ),
            ),
            _spatial_halving_pool(),
        ),
    )
    block2 = BlockSpec(
        name="block2",
        stages=(
            BranchGroupSpec(
                name="block2_branches",
                branches=(
                    (ConvSpec(64, one), ConvSpec(81, (3, 3, 7))),
                    (ConvSpec(81, (3, 7, 3)),),
                ),
            ),
            _spatial_halving_pool(),
        ),
    )
    block3 = BlockSpec(
        name="block3",
        stages=(
            *(inception_module(n, *a) for n, *a in _BLOCK3_MODULES),
            _spatial_halving_pool(),
        ),
    )
    block4 = BlockSpec(
        name="block4",
        stages=(
            _full_halving_pool(),
            *(inception_module(n, *a) for n, *a in _BLOCK4_MODULES),
        ),
    )
    block5 = BlockSpec(
        name="block5",
        stages=(
            _full_halving_pool(),
            *(inception_module(n, *a) for n, *a in _BLOCK5_MODULES),
        ),
    )
    return BackboneConfig(
        input_shape=input_shape,
        blocks=(block1, block2, block3, block4, block5),
        embedding_dim=FULL_EMBEDDING_DIM,
        name="full",
    )


def reduced_backbone_config(
    input_shape: tuple[int, int, int, int] = (16, 64, 64, 3),
) -> BackboneConfig:
    """A three-block desk-scale variant of the same layout (80-dim embedding)."""
    one = (1, 1, 1)
    block1 = BlockSpec(
        name="block1",
        stages=(
            BranchGroupSpec(
                name="block1_branches",
                branches=(
                    (
                        ConvSpec(12, (3, 3, 3), stride=(2, 2, 2)),
                        ConvSpec(12, (3, 3, 3)),
                    ),
                    (
                        PoolSpec(kernel=(3, 3, 3), stride=(2, 2, 2)),
                        ConvSpec(12, one),
                    ),
                ),
            ),
            _spatial_halving_pool(),
        ),
    )
    block2 = BlockSpec(
        name="block2",
        stages=(
            BranchGroupSpec(
                name="block2_branches",
                branches=(
                    (ConvSpec(16, one), ConvSpec(24, (3, 3, 3))),
                    (ConvSpec(24, (3, 3, 3)),),
                ),
            ),
            _full_halving_pool(),
        ),
    )
    block3 = BlockSpec(
        name="block3",
        stages=(
            inception_module("block3_m1", 24, 16, 32, 8, 16, 8),  # -> 80
            _full_halving_pool(),
        ),
    )
    return BackboneConfig(
        input_shape=input_shape,
        blocks=(block1, block2, block3),
        embedding_dim=80,
        name="reduced",
    )


def tiny_backbone_config(
    input_shape: tuple[int, int, int, int] = (8, 16, 16, 3),
) -> BackboneConfig:
    """Two blocks, 8 output channels: small enough for finite-difference checks."""
    one = (1, 1, 1)
    block1 = BlockSpec(
        name="block1",
        stages=(
            BranchGroupSpec(
                name="block1_branches",
                branches=(
                    (ConvSpec(4, (3, 3, 3), stride=(1, 2, 2)),),
                    (
                        PoolSpec(kernel=(3, 3, 3), stride=(1, 2, 2)),
                        ConvSpec(4, one),
                    ),
                ),
            ),
        ),
    )
    block2 = BlockSpec(
        name="block2",
        stages=(
            BranchGroupSpec(
                name="block2_branches",
                branches=(
                    (ConvSpec(4, one), ConvSpec(4, (3, 3, 3))),
                    (ConvSpec(4, (3, 3, 3)),),
                ),
            ),
            _full_halving_pool(),
        ),
    )
    return BackboneConfig(
        input_shape=input_shape,
        blocks=(block1, block2),
        embedding_dim=8,
        name="tiny",
    )


BACKBONE_BUILDERS = {
    "full": full_backbone_config,
    "reduced": reduced_backbone_config,
    "tiny": tiny_backbone_config,
}

HEAD_PRESETS = {
    "full": HeadConfig(in_dim=1024, fc1_units=1024, fc2_units=512),
    "reduced": HeadConfig(in_dim=80, fc1_units=96, fc2_units=64),
    "tiny": HeadConfig(in_dim=8, fc1_units=8, fc2_units=8),
}
