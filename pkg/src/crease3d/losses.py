"""Training objectives: cosine distance, online-mined triplet loss, ArcFace.

The scalar/numpy functions here are the reference semantics (used directly
by the evaluation path and by tests); the torch pieces mirror them for the
two training stages.  Stage 1 mines triplets from a P x K batch and hinges
on cosine distance; Stage 2 classifies unit embeddings through an additive
angular margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DegenerateEmbedding, InvalidConfig, InvalidTarget, ShapeMismatch
from .network import glorot_uniform_

_COS_CLAMP = 1.0 - 1e-7
_NORM_EPS = 1e-12


class Triplet(NamedTuple):
    anchor_idx: int
    positive_idx: int
    negative_idx: int


@dataclass(frozen=True)
class TripletConfig:
    """Margin and mining policy for Stage 1.

    ``margin_schedule`` is "constant" (stay at ``margin``) or "linear-ramp"
    (ramp from ``margin`` to ``margin_max`` over the run; see `margin_at`).
    """

    margin: float = 0.5
    margin_max: float = 1.5
    mining_policy: str = "batch-all-valid"
    simultaneous_triplets: int = 2
    margin_schedule: str = "constant"

    def __post_init__(self):
        if not 0.0 < self.margin <= self.margin_max:
            raise InvalidConfig(f"need 0 < margin <= margin_max, got {self}")
        if self.mining_policy not in ("batch-all-valid", "batch-hard"):
            raise InvalidConfig(f"unknown mining policy {self.mining_policy!r}")
        if self.simultaneous_triplets < 1:
            raise InvalidConfig("simultaneous_triplets must be >= 1")
        if self.margin_schedule not in ("constant", "linear-ramp"):
            raise InvalidConfig(f"unknown margin schedule {self.margin_schedule!r}")

    def margin_at(self, progress: float) -> float:
        """Effective margin at training progress in [0, 1]."""
        if self.margin_schedule == "constant":
            return self.margin
        p = min(max(progress, 0.0), 1.0)
        return self.margin + (self.margin_max - self.margin) * p


@dataclass(frozen=True)
class ArcConfig:
    """Additive angular margin softmax for Stage 2."""

    margin: float = 0.5
    scale: float = 30.0
    num_classes: int = 2
    weight_init: str = "glorot-uniform"

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi / 2:
            raise InvalidConfig(f"margin must be in [0, pi/2), got {self.margin}")
        if self.scale <= 0:
            raise InvalidConfig("scale must be positive")
        if self.num_classes < 2:
            raise InvalidConfig("need at least 2 classes")
        if self.weight_init != "glorot-uniform":
            raise InvalidConfig(f"unsupported init {self.weight_init!r}")


# ---------------------------------------------------------------------------
# Distances and the triplet hinge
# ---------------------------------------------------------------------------

def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _NORM_EPS or nb < _NORM_EPS:
        raise DegenerateEmbedding("cosine distance of a zero-norm vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def pairwise_cosine_distance(embeddings: np.ndarray) -> np.ndarray:
    """(n, d) -> (n, n) matrix of 1 - cosine similarity."""
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms < _NORM_EPS):
        raise DegenerateEmbedding("zero-norm row in embedding batch")
    unit = emb / norms[:, None]
    return 1.0 - unit @ unit.T


def triplet_loss(d_ap: float, d_an: float, m: float) -> float:
    return max(0.0, d_ap - d_an + m)


def mine_triplets(embeddings: np.ndarray, labels: Sequence[int],
                  cfg: TripletConfig, margin: float | None = None) -> list[Triplet]:
    """Online triplet selection over one batch.

    "batch-all-valid" returns exactly the label-valid triplets whose hinge
    loss is strictly positive, ordered by (anchor, positive, negative)
    index.  "batch-hard" returns at most one triplet per anchor (its
    largest-distance positive and smallest-distance negative, smallest
    index on ties), kept regardless of hinge value.  An empty list simply
    means nothing to learn from this batch.
    """
    m = cfg.margin if margin is None else margin
    labels = np.asarray(labels)
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != labels.shape[0]:
        raise ShapeMismatch(
            f"embeddings {emb.shape} vs {labels.shape[0]} labels")
    n = emb.shape[0]
    dist = pairwise_cosine_distance(emb)
    out: list[Triplet] = []
    for a in range(n):
        same = labels == labels[a]
        pos_idx = np.flatnonzero(same)
        pos_idx = pos_idx[pos_idx != a]
        neg_idx = np.flatnonzero(~same)
        if pos_idx.size == 0 or neg_idx.size == 0:
            continue
        d_ap = dist[a, pos_idx]
        d_an = dist[a, neg_idx]
        if cfg.mining_policy == "batch-hard":
            p = pos_idx[int(np.argmax(d_ap))]
            q = neg_idx[int(np.argmin(d_an))]
            out.append(Triplet(a, int(p), int(q)))
            continue
        hinge = d_ap[:, None] - d_an[None, :] + m
        rows, cols = np.nonzero(hinge > 0.0)
        for r, c in zip(rows, cols):
            out.append(Triplet(a, int(pos_idx[r]), int(neg_idx[c])))
    return out


def chunked_triplet_loss(embeddings: torch.Tensor, triplets: Sequence[Triplet],
                         margin: float, chunk_size: int) -> torch.Tensor:
    """Mean over micro-batches of the mean per-triplet hinge loss.

    `embeddings` must carry grad; distances are recomputed on the graph so
    the optimizer step sees the same cosine geometry the miner saw.
    """
    if not triplets:
        raise InvalidConfig("no triplets to score")
    unit = embeddings / torch.linalg.vector_norm(embeddings, dim=1, keepdim=True)
    a = torch.tensor([t.anchor_idx for t in triplets])
    p = torch.tensor([t.positive_idx for t in triplets])
    q = torch.tensor([t.negative_idx for t in triplets])
    d_ap = 1.0 - (unit[a] * unit[p]).sum(dim=1)
    d_an = 1.0 - (unit[a] * unit[q]).sum(dim=1)
    per = torch.clamp(d_ap - d_an + margin, min=0.0)
    chunk_means = [per[i:i + chunk_size].mean()
                   for i in range(0, per.shape[0], chunk_size)]
    return torch.stack(chunk_means).mean()


# ---------------------------------------------------------------------------
# ArcFace
# ---------------------------------------------------------------------------

def arcface_logits(e: np.ndarray, W: np.ndarray, target: int,
                   cfg: ArcConfig) -> np.ndarray:
    """Scaled cosine logits with an additive angular margin on the target.

    ``W`` holds one unit column per class.  Cosines are clamped to
    +-(1 - 1e-7) before arccos; past theta_t + m >= pi the margin falls
    back to the linear penalty cos(theta_t) - m*sin(m) so the logit stays
    monotone in theta.
    """
    e = np.asarray(e, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if e.ndim != 1 or W.ndim != 2 or W.shape[0] != e.shape[0]:
        raise ShapeMismatch(f"embedding {e.shape} vs weight {W.shape}")
    if W.shape[1] != cfg.num_classes:
        raise ShapeMismatch(
            f"weight has {W.shape[1]} columns, config says {cfg.num_classes}")
    if not 0 <= target < cfg.num_classes:
        raise InvalidTarget(f"target {target} outside [0, {cfg.num_classes})")
    ne = np.linalg.norm(e)
    if ne < _NORM_EPS:
        raise DegenerateEmbedding("zero-norm embedding")
    col_norms = np.linalg.norm(W, axis=0)
    cos = np.clip((e / ne) @ (W / col_norms), -_COS_CLAMP, _COS_CLAMP)
    logits = cfg.scale * cos
    theta_t = math.acos(cos[target])
    if theta_t + cfg.margin < math.pi:
        logits[target] = cfg.scale * math.cos(theta_t + cfg.margin)
    else:
        logits[target] = cfg.scale * (cos[target] - cfg.margin * math.sin(cfg.margin))
    return logits


def softmax_cross_entropy(logits: np.ndarray, target: int) -> float:
    """-log softmax(logits)[target], max-subtracted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[target])


class ArcFaceClassifier(nn.Module):
    """Trainable ArcFace layer: one weight row per identity.

    forward() returns margin-adjusted scaled logits ready for plain
    cross-entropy.  Weight rows are renormalized every call, so only the
    direction of each row is learned.
    """

    def __init__(self, in_dim: int, cfg: ArcConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.weight = nn.Parameter(torch.empty(cfg.num_classes, in_dim))
        glorot_uniform_(self.weight, in_dim, cfg.num_classes,
                        torch.Generator().manual_seed(seed))

    def forward(self, embeddings: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        if embeddings.shape[1] != self.weight.shape[1]:
            raise ShapeMismatch(
                f"embedding dim {embeddings.shape[1]} != weight dim {self.weight.shape[1]}")
        if targets.numel() and (int(targets.min()) < 0
                                or int(targets.max()) >= self.cfg.num_classes):
            raise InvalidTarget("class id outside classifier range")
        unit_e = embeddings / torch.linalg.vector_norm(embeddings, dim=1, keepdim=True)
        unit_w = self.weight / torch.linalg.vector_norm(self.weight, dim=1, keepdim=True)
        cos = torch.clamp(unit_e @ unit_w.T, -_COS_CLAMP, _COS_CLAMP)
        theta_t = torch.acos(cos.gather(1, targets[:, None]))
        m = self.cfg.margin
        adjusted = torch.where(
            theta_t + m < math.pi,
            torch.cos(theta_t + m),
            cos.gather(1, targets[:, None]) - m * math.sin(m),
        )
        logits = cos.scatter(1, targets[:, None], adjusted)
        return self.cfg.scale * logits
