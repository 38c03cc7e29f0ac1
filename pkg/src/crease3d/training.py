"""Two-stage trainer plus deterministic checkpointing.

Stage 1 (`train_backbone`): P x K identity batches, online triplet mining
on the current embeddings, one optimizer step per batch.  A batch that
mines no positive-loss triplet still advances the step counter (loss 0.0)
but leaves parameters untouched.

Stage 2 (`train_head`): the backbone is frozen (and verified unchanged by
hashing), its embeddings are cached per sample, and only the head plus the
ArcFace classifier learn.

Checkpoints use a purpose-built container (`save_checkpoint`) whose bytes
are a pure function of its contents, so save -> load -> save is bitwise
identity: magic, a little-endian uint32 header length, a canonical JSON
header describing each array (dtype, shape, offset, sha256) and the run
metadata, then the concatenated raw array payloads.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .datakit import DatasetManifest, SampleRecord, derive_seed
from .errors import (
    Crease3dError,
    CorruptCheckpoint,
    InsufficientSubjects,
    InvalidConfig,
    NonFinite,
)
from .losses import ArcConfig, ArcFaceClassifier, TripletConfig, chunked_triplet_loss, mine_triplets
from .montage import MontageConfig, image_to_cube, load_cube, load_roi
from .network import CubeBackbone, EmbeddingHead, cubes_to_tensor

CHECKPOINT_MAGIC = b"CKPT3D01"
LOSS_HISTORY_KEY = "__loss_history__"


@dataclass(frozen=True)
class BatchSpec:
    persons_per_batch: int = 100
    images_per_person: int = 5
    batches_per_epoch: int = 1000

    def __post_init__(self):
        if self.persons_per_batch < 2 or self.images_per_person < 2:
            raise InvalidConfig("need >= 2 persons and >= 2 images per person")
        if self.batches_per_epoch < 1:
            raise InvalidConfig("batches_per_epoch must be >= 1")

    @property
    def batch_size(self) -> int:
        return self.persons_per_batch * self.images_per_person


@dataclass(frozen=True)
class OptimizerSpec:
    """Adam hyperparameters; learning_rate 0 is allowed for no-op sanity runs."""

    learning_rate: float = 1.0e-5
    max_epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.max_epochs < 1:
            raise InvalidConfig("max_epochs must be >= 1")

    def build(self, params) -> torch.optim.Adam:
        return torch.optim.Adam(params, lr=self.learning_rate,
                                betas=(self.beta1, self.beta2), eps=self.eps)


@dataclass
class TrainState:
    stage: str = "backbone"
    epoch: int = 0
    step: int = 0
    rng_seed: int = 0
    loss_history: list[float] = field(default_factory=list)

    def meta(self) -> dict:
        return {"stage": self.stage, "epoch": self.epoch, "step": self.step,
                "rng_seed": self.rng_seed}


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------

def sample_batch(manifest: DatasetManifest, spec: BatchSpec,
                 seed: int) -> tuple[list[SampleRecord], np.ndarray]:
    """Draw Pn subjects x K samples; labels are global subject indices.

    Per subject the K samples are drawn without replacement when it has at
    least K images, with replacement otherwise, so the batch shape never
    varies.
    """
    subjects = manifest.subject_ids
    if len(subjects) < spec.persons_per_batch:
        raise InsufficientSubjects(
            f"manifest has {len(subjects)} subjects, batch needs "
            f"{spec.persons_per_batch}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(subjects), size=spec.persons_per_batch, replace=False)
    by_subject = manifest.by_subject()
    items: list[SampleRecord] = []
    labels = np.empty(spec.batch_size, dtype=np.int64)
    pos = 0
    for subj_idx in chosen:
        recs = sorted(by_subject[subjects[subj_idx]], key=lambda r: r.sample_id)
        k = spec.images_per_person
        picks = rng.choice(len(recs), size=k, replace=len(recs) < k)
        for p in picks:
            items.append(recs[int(p)])
            labels[pos] = int(subj_idx)
            pos += 1
    return items, labels


# ---------------------------------------------------------------------------
# Cube providers
# ---------------------------------------------------------------------------

CubeProvider = Callable[[Sequence[SampleRecord]], np.ndarray]


class RoiCubeProvider:
    """Builds cubes from the manifest's images on the fly, caching the ROIs."""

    def __init__(self, cfg: MontageConfig, cache_rois: bool = True):
        self.cfg = cfg
        self._cache: Optional[dict[str, object]] = {} if cache_rois else None

    def _roi(self, rec: SampleRecord):
        if self._cache is not None and rec.sample_id in self._cache:
            return self._cache[rec.sample_id]
        roi = load_roi(rec.path, source_id=rec.sample_id)
        if self._cache is not None:
            self._cache[rec.sample_id] = roi
        return roi

    def __call__(self, records: Sequence[SampleRecord]) -> np.ndarray:
        return np.stack([image_to_cube(self._roi(r), self.cfg).data
                         for r in records])


class CubeFileProvider:
    """Reads preprocessed ``.cube`` files mirroring the manifest layout."""

    def __init__(self, cube_root):
        self.cube_root = Path(cube_root)

    def path_for(self, rec: SampleRecord) -> Path:
        return self.cube_root / f"{rec.sample_id}.cube"

    def __call__(self, records: Sequence[SampleRecord]) -> np.ndarray:
        return np.stack([load_cube(self.path_for(r)).data for r in records])


# ---------------------------------------------------------------------------
# Hashing and checkpoints
# ---------------------------------------------------------------------------

def module_params(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy().copy()
            for name, t in module.state_dict().items()}


def load_params_into(module: nn.Module, params: Mapping[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.ascontiguousarray(arr))
             for name, arr in params.items()}
    module.load_state_dict(state)


def params_hash(params_or_module) -> str:
    """sha256 over (name, dtype, shape, bytes) of every parameter, sorted."""
    params = (module_params(params_or_module)
              if isinstance(params_or_module, nn.Module) else params_or_module)
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def config_hash(config: Mapping) -> str:
    """Canonical hash of a JSON-serializable config mapping."""
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def save_checkpoint(state: TrainState, params: Mapping[str, np.ndarray], path,
                    config_digest: str = "", preset_name: str = "") -> None:
    arrays = dict(params)
    if LOSS_HISTORY_KEY in arrays:
        raise InvalidConfig(f"{LOSS_HISTORY_KEY} is reserved")
    arrays[LOSS_HISTORY_KEY] = np.asarray(state.loss_history, dtype=np.float64)
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        payload.extend(raw)
    header = {
        "arrays": entries,
        "meta": {**state.meta(), "config_hash": config_digest,
                 "preset_name": preset_name},
    }
    head_raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head_raw)))
        fh.write(head_raw)
        fh.write(bytes(payload))


def load_checkpoint(path, expected_config_hash: Optional[str] = None
                    ) -> tuple[TrainState, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CorruptCheckpoint(f"cannot read {path}: {e}") from e
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    off = len(CHECKPOINT_MAGIC)
    (head_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off: off + head_len].decode())
    except ValueError as e:
        raise CorruptCheckpoint(f"{path}: unparseable header") from e
    base = off + head_len
    meta = header["meta"]
    if expected_config_hash is not None and meta["config_hash"] != expected_config_hash:
        raise CorruptCheckpoint(
            f"{path}: config hash {meta['config_hash'][:12]}... does not match "
            f"expected {expected_config_hash[:12]}...")
    arrays: dict[str, np.ndarray] = {}
    for e in header["arrays"]:
        chunk = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CorruptCheckpoint(f"{path}: truncated payload for {e['name']}")
        if hashlib.sha256(chunk).hexdigest() != e["sha256"]:
            raise CorruptCheckpoint(f"{path}: payload hash mismatch for {e['name']}")
        arrays[e["name"]] = np.frombuffer(
            chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    history = arrays.pop(LOSS_HISTORY_KEY, np.zeros(0))
    state = TrainState(stage=meta["stage"], epoch=meta["epoch"],
                       step=meta["step"], rng_seed=meta["rng_seed"],
                       loss_history=[float(x) for x in history])
    return state, arrays


def _append_epoch_log(log_path, epoch: int, mean_loss: float, wall: float) -> None:
    if log_path is None:
        return
    p = Path(log_path)
    new = not p.exists()
    with open(p, "a", newline="") as fh:
        if new:
            fh.write("epoch,mean_loss,wall_time\n")
        fh.write(f"{epoch},{mean_loss:.10g},{wall:.3f}\n")


# ---------------------------------------------------------------------------
# Stage 1: backbone with mined triplets
# ---------------------------------------------------------------------------

def _check_step_loss(value: float, stage: str, step: int) -> None:
    if not np.isfinite(value):
        raise NonFinite(f"{stage} loss became {value} at step {step}; "
                        "check learning rate and input scaling")


def _check_step_embeddings(emb: torch.Tensor, stage: str, step: int) -> None:
    # NaN embeddings would make every mined comparison false and let a
    # diverged run limp on silently; fail loudly instead.
    if not bool(torch.isfinite(emb).all()):
        raise NonFinite(f"{stage} embeddings non-finite at step {step}; "
                        "parameters have diverged")


def train_backbone(manifest: DatasetManifest, model: CubeBackbone,
                   loss_cfg: TripletConfig, opt: OptimizerSpec,
                   batch_spec: BatchSpec, state: TrainState,
                   provider: CubeProvider,
                   checkpoint_dir=None, log_path=None,
                   config_digest: str = "") -> TrainState:
    """Run Stage 1 from state.epoch to opt.max_epochs; returns final state."""
    if state.stage != "backbone":
        raise InvalidConfig(f"expected stage 'backbone', got {state.stage!r}")
    optimizer = opt.build(model.parameters())
    total_steps = max(1, opt.max_epochs * batch_spec.batches_per_epoch)
    dtype = next(model.parameters()).dtype
    for epoch in range(state.epoch, opt.max_epochs):
        t0 = time.monotonic()
        epoch_losses = []
        model.train()
        for b in range(batch_spec.batches_per_epoch):
            seed = derive_seed(state.rng_seed, "backbone", epoch, b)
            records, labels = sample_batch(manifest, batch_spec, seed)
            cubes = provider(records)
            emb = model(cubes_to_tensor(cubes, dtype))
            _check_step_embeddings(emb, "backbone", state.step)
            margin = loss_cfg.margin_at(state.step / total_steps)
            triplets = mine_triplets(emb.detach().numpy(), labels, loss_cfg,
                                     margin=margin)
            if not triplets:
                # nothing violates the margin: no gradient, but the step counts
                state.step += 1
                state.loss_history.append(0.0)
                epoch_losses.append(0.0)
                continue
            loss = chunked_triplet_loss(emb, triplets, margin,
                                        loss_cfg.simultaneous_triplets)
            value = float(loss.detach())
            _check_step_loss(value, "backbone", state.step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            state.step += 1
            state.loss_history.append(value)
            epoch_losses.append(value)
        state.epoch = epoch + 1
        _append_epoch_log(log_path, state.epoch, float(np.mean(epoch_losses)),
                          time.monotonic() - t0)
        if checkpoint_dir is not None:
            save_checkpoint(state, module_params(model),
                            Path(checkpoint_dir) / f"backbone_epoch{state.epoch:04d}.ckpt",
                            config_digest=config_digest, preset_name=model.config.name)
    return state


# ---------------------------------------------------------------------------
# Stage 2: frozen backbone, ArcFace head
# ---------------------------------------------------------------------------

class _FrozenEmbeddingCache:
    """Backbone embeddings keyed by sample id; valid only while frozen."""

    def __init__(self, backbone: CubeBackbone, provider: CubeProvider):
        self.backbone = backbone
        self.provider = provider
        self._store: dict[str, np.ndarray] = {}

    def batch(self, records: Sequence[SampleRecord]) -> np.ndarray:
        missing = [r for r in records if r.sample_id not in self._store]
        if missing:
            cubes = self.provider(missing)
            dtype = next(self.backbone.parameters()).dtype
            with torch.no_grad():
                emb = self.backbone(cubes_to_tensor(cubes, dtype)).numpy()
            for rec, e in zip(missing, emb):
                self._store[rec.sample_id] = e
        return np.stack([self._store[r.sample_id] for r in records])


def train_head(manifest: DatasetManifest, backbone: CubeBackbone,
               head: EmbeddingHead, arc_cfg: ArcConfig, opt: OptimizerSpec,
               batch_spec: BatchSpec, state: TrainState,
               provider: CubeProvider,
               freeze_backbone: bool = True,
               checkpoint_dir=None, log_path=None,
               config_digest: str = "") -> TrainState:
    """Run Stage 2; returns final state.  The classifier covers every
    manifest subject (labels are global subject indices)."""
    if state.stage != "head":
        raise InvalidConfig(f"expected stage 'head', got {state.stage!r}")
    if arc_cfg.num_classes != len(manifest.subject_ids):
        raise InvalidConfig(
            f"classifier has {arc_cfg.num_classes} classes but manifest has "
            f"{len(manifest.subject_ids)} subjects")
    classifier = ArcFaceClassifier(head.config.fc2_units, arc_cfg,
                                   seed=derive_seed(state.rng_seed, "arcface"))
    classifier = classifier.to(next(head.parameters()).dtype)
    trainable = list(head.parameters()) + list(classifier.parameters())
    if freeze_backbone:
        backbone.requires_grad_(False)
        backbone.eval()
        frozen_hash = params_hash(backbone)
        cache = _FrozenEmbeddingCache(backbone, provider)
    else:
        trainable = list(backbone.parameters()) + trainable
        cache = None
    optimizer = opt.build(trainable)
    dtype = next(head.parameters()).dtype
    for epoch in range(state.epoch, opt.max_epochs):
        t0 = time.monotonic()
        epoch_losses = []
        head.train()
        for b in range(batch_spec.batches_per_epoch):
            seed = derive_seed(state.rng_seed, "head", epoch, b)
            records, labels = sample_batch(manifest, batch_spec, seed)
            targets = torch.from_numpy(labels)
            if cache is not None:
                feats = torch.from_numpy(cache.batch(records)).to(dtype)
            else:
                backbone.train()
                feats = backbone(cubes_to_tensor(provider(records), dtype))
            emb = head(feats)
            _check_step_embeddings(emb, "head", state.step)
            logits = classifier(emb, targets)
            loss = torch.nn.functional.cross_entropy(logits, targets)
            value = float(loss.detach())
            _check_step_loss(value, "head", state.step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            state.step += 1
            state.loss_history.append(value)
            epoch_losses.append(value)
        state.epoch = epoch + 1
        if freeze_backbone and params_hash(backbone) != frozen_hash:
            raise Crease3dError("frozen backbone parameters drifted during "
                                f"epoch {state.epoch}")
        _append_epoch_log(log_path, state.epoch, float(np.mean(epoch_losses)),
                          time.monotonic() - t0)
        if checkpoint_dir is not None:
            params = {**{f"head.{k}": v for k, v in module_params(head).items()},
                      **{f"classifier.{k}": v
                         for k, v in module_params(classifier).items()}}
            save_checkpoint(state, params,
                            Path(checkpoint_dir) / f"head_epoch{state.epoch:04d}.ckpt",
                            config_digest=config_digest, preset_name="")
    return state
