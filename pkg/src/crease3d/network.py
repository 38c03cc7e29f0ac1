"""Torch realization of the declarative backbone/head specs.

Layout convention: the library keeps cubes channels-last ``(D, H, W, 3)``
(numpy); torch modules run channels-first ``(N, C, D, H, W)``.  The
`backbone_forward` / `head_forward` wrappers do the conversion and shape
checking so callers never touch tensors directly.

Weights are glorot-uniform from an explicit seeded generator and all biases
start at zero, which makes freshly built models a pure function of
(config, seed).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from . import netspec
from .errors import DegenerateEmbedding, NonFinite, ShapeMismatch
from .montage import MontageCube

_NORM_EPS = 1e-12


def glorot_uniform_(tensor: torch.Tensor, fan_in: int, fan_out: int,
                    generator: torch.Generator) -> None:
    # nn.init.xavier_uniform_ has no generator argument, so sample directly.
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


def _init_conv(conv: nn.Conv3d, generator: torch.Generator) -> None:
    out_c, in_c, kt, kh, kw = conv.weight.shape
    k = kt * kh * kw
    glorot_uniform_(conv.weight, in_c * k, out_c * k, generator)
    with torch.no_grad():
        conv.bias.zero_()


def _init_linear(fc: nn.Linear, generator: torch.Generator) -> None:
    out_f, in_f = fc.weight.shape
    glorot_uniform_(fc.weight, in_f, out_f, generator)
    with torch.no_grad():
        fc.bias.zero_()


def _make_layer(spec: netspec.LayerSpec, in_channels: int) -> tuple[nn.Module, int]:
    if isinstance(spec, netspec.ConvSpec):
        conv = nn.Conv3d(
            in_channels, spec.out_channels, kernel_size=spec.kernel,
            stride=spec.stride, padding=spec.pad(),
        )
        return nn.Sequential(conv, nn.ReLU()), spec.out_channels
    cls = nn.MaxPool3d if spec.kind == "max" else nn.AvgPool3d
    return cls(kernel_size=spec.kernel, stride=spec.stride, padding=spec.pad()), in_channels


class _BranchGroup(nn.Module):
    """Runs each branch on the shared input and concatenates along channels."""

    def __init__(self, spec: netspec.BranchGroupSpec, in_channels: int):
        super().__init__()
        branches = []
        out_channels = 0
        for branch in spec.branches:
            layers = []
            c = in_channels
            for layer_spec in branch:
                mod, c = _make_layer(layer_spec, c)
                layers.append(mod)
            branches.append(nn.Sequential(*layers))
            out_channels += c
        self.branches = nn.ModuleList(branches)
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([b(x) for b in self.branches], dim=1)


def _make_block(spec: netspec.BlockSpec, in_channels: int) -> tuple[nn.Module, int]:
    stages = []
    c = in_channels
    for stage in spec.stages:
        if isinstance(stage, netspec.BranchGroupSpec):
            group = _BranchGroup(stage, c)
            stages.append(group)
            c = group.out_channels
        else:
            mod, c = _make_layer(stage, c)
            stages.append(mod)
    return nn.Sequential(*stages), c


class CubeBackbone(nn.Module):
    """Blocks from a `BackboneConfig`, ending in global average pooling.

    forward() takes ``(N, C, D, H, W)`` and returns ``(N, embedding_dim)``.
    """

    def __init__(self, config: netspec.BackboneConfig):
        super().__init__()
        self.config = config
        self.plan = netspec.shape_plan(config)
        blocks = []
        c = config.input_shape[3]
        for block_spec in config.blocks:
            block, c = _make_block(block_spec, c)
            blocks.append(block)
        self.blocks = nn.ModuleList(blocks)
        self.embedding_dim = c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x.mean(dim=(2, 3, 4))

    def block_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-block activations, for verifying the analytic shape plan."""
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs


class EmbeddingHead(nn.Module):
    """FC -> rectifier -> FC, then (optionally) L2 normalization."""

    def __init__(self, config: netspec.HeadConfig):
        super().__init__()
        self.config = config
        self.fc1 = nn.Linear(config.in_dim, config.fc1_units)
        self.fc2 = nn.Linear(config.fc1_units, config.fc2_units)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.fc2(torch.relu(self.fc1(x)))
        if not self.config.output_normalized:
            return x
        norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
        if bool((norms < _NORM_EPS).any()):
            raise DegenerateEmbedding("zero-norm head output cannot be normalized")
        return x / norms


def build_backbone(config: netspec.BackboneConfig, seed: int = 0,
                   dtype: torch.dtype = torch.float32) -> CubeBackbone:
    model = CubeBackbone(config).to(dtype)
    g = torch.Generator().manual_seed(seed)
    for mod in model.modules():
        if isinstance(mod, nn.Conv3d):
            _init_conv(mod, g)
    return model


def build_head(config: netspec.HeadConfig, seed: int = 0,
               dtype: torch.dtype = torch.float32) -> EmbeddingHead:
    model = EmbeddingHead(config).to(dtype)
    g = torch.Generator().manual_seed(seed)
    _init_linear(model.fc1, g)
    _init_linear(model.fc2, g)
    return model


# ---------------------------------------------------------------------------
# numpy-facing wrappers
# ---------------------------------------------------------------------------

CubeLike = Union[MontageCube, np.ndarray]


def _cube_batch(cubes: Union[CubeLike, Sequence[CubeLike]],
                expected: tuple[int, int, int, int]) -> tuple[np.ndarray, bool]:
    """Coerce input to a float32 (N, D, H, W, C) array; report batchness."""
    if isinstance(cubes, MontageCube):
        arrays, batched = [cubes.data], False
    elif isinstance(cubes, np.ndarray):
        if cubes.ndim == 4:
            arrays, batched = [cubes], False
        elif cubes.ndim == 5:
            arrays, batched = list(cubes), True
        else:
            raise ShapeMismatch(f"expected 4D cube or 5D batch, got ndim={cubes.ndim}")
    else:
        arrays, batched = [c.data if isinstance(c, MontageCube) else np.asarray(c)
                           for c in cubes], True
    for a in arrays:
        if tuple(a.shape) != expected:
            raise ShapeMismatch(f"cube shape {tuple(a.shape)} != expected {expected}")
    return np.stack(arrays).astype(np.float32, copy=False), batched


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NonFinite(f"{what} contains NaN/Inf")


def cubes_to_tensor(batch: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(N, D, H, W, C) numpy -> (N, C, D, H, W) torch."""
    return torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 4, 1, 2, 3).to(dtype).contiguous()


def backbone_forward(model: CubeBackbone,
                     cubes: Union[CubeLike, Sequence[CubeLike]]) -> np.ndarray:
    """Inference-mode embedding of one cube (or a batch of cubes).

    Returns float64 ``(embedding_dim,)`` for a single cube, ``(N, dim)``
    for a batch.  Raises ShapeMismatch on wrong input geometry and
    NonFinite if the embedding picks up NaN/Inf from bad parameters.
    """
    batch, batched = _cube_batch(cubes, model.config.input_shape)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            emb = model(cubes_to_tensor(batch, dtype))
    finally:
        model.train(was_training)
    _check_finite(emb, "backbone embedding")
    out = emb.numpy().astype(np.float64)
    return out if batched else out[0]


def head_forward(model: EmbeddingHead, embeddings: np.ndarray) -> np.ndarray:
    """Inference-mode head projection; preserves input batchness."""
    arr = np.asarray(embeddings, dtype=np.float64)
    batched = arr.ndim == 2
    if not batched:
        if arr.ndim != 1:
            raise ShapeMismatch(f"expected 1D or 2D embeddings, got ndim={arr.ndim}")
        arr = arr[None]
    if arr.shape[1] != model.config.in_dim:
        raise ShapeMismatch(
            f"embedding length {arr.shape[1]} != head input {model.config.in_dim}")
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(torch.from_numpy(arr).to(dtype))
    finally:
        model.train(was_training)
    _check_finite(out, "head embedding")
    res = out.numpy().astype(np.float64)
    return res if batched else res[0]


def embed_cubes(backbone: CubeBackbone, head: EmbeddingHead,
                cubes: Union[CubeLike, Sequence[CubeLike]]) -> np.ndarray:
    """Full pipeline: cube batch -> backbone -> head -> unit-norm vectors."""
    return head_forward(head, backbone_forward(backbone, cubes))


def verify_block_shapes(model: CubeBackbone,
                        sample: Optional[np.ndarray] = None) -> list[tuple[int, ...]]:
    """Run one cube through the blocks and check against the analytic plan.

    Returns the observed (t, h, w, c) shapes; raises ShapeMismatch on the
    first block whose output disagrees with `shape_plan`.
    """
    if sample is None:
        sample = np.zeros(model.config.input_shape, dtype=np.float32)
    batch, _ = _cube_batch(sample, model.config.input_shape)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        outs = model.block_outputs(cubes_to_tensor(batch, dtype))
    observed = []
    for name, planned, out in zip(model.plan.block_names, model.plan.block_shapes, outs):
        n, c, t, h, w = out.shape
        got = (t, h, w, c)
        if got != planned:
            raise ShapeMismatch(f"{name}: observed {got}, planned {planned}")
        observed.append(got)
    return observed
