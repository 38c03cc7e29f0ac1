"""Command-line pipeline: synth, preprocess, train-backbone, train-head,
embed, evaluate.

Configuration resolves in three layers, most specific wins:
explicit CLI flags > JSON config file (--config or $CREASE3D_CONFIG) >
built-in defaults.  The defaults carry the reference hyperparameters
(triplet margin 0.5, ArcFace margin 0.5 / scale 30.0, lr 1e-5, 100x5
batches, 1000 batches/epoch, 1000 epochs); desk-scale runs override them.

Every command drops its outputs under --out together with a run manifest
(run.json) and a content-hash marker, so re-running a finished command is
a no-op and changing any config knob invalidates the marker.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import datakit, evaluation, losses, montage, netspec, network, training
from .errors import Crease3dError, InvalidConfig, ValidationError

CONFIG_ENV_VAR = "CREASE3D_CONFIG"


@dataclass(frozen=True)
class RunConfig:
    """Every knob the pipeline understands, with reference defaults."""

    # data / montage
    montage_preset: str = "cube80x224"
    model_preset: str = "full"
    seed: int = 0
    # synth
    subjects: int = 20
    samples_per_subject: int = 10
    sessions: int = 2
    image_height: int = 64
    image_width: int = 64
    warp_amplitude: float = 2.0
    brightness_range: float = 0.12
    noise_sigma: float = 0.02
    # stage 1
    margin: float = 0.5
    margin_max: float = 1.5
    margin_schedule: str = "constant"
    mining: str = "batch-all-valid"
    simultaneous_triplets: int = 2
    # stage 2
    arc_margin: float = 0.5
    arc_scale: float = 30.0
    freeze_backbone: bool = True
    # optimizer / batches
    lr: float = 1.0e-5
    epochs: int = 1000
    batches_per_epoch: int = 1000
    persons_per_batch: int = 100
    images_per_person: int = 5
    # evaluation
    gallery_per_subject: int = 10
    probe_per_subject: int = 10
    split_method: str = "session-aware"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise InvalidConfig(f"cannot read config {path}: {e}") from e
    except ValueError as e:
        raise InvalidConfig(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise InvalidConfig(f"config {path} must hold a JSON object")
    RunConfig.from_dict(raw)  # rejects unknown keys; partial files are fine
    return raw


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    """defaults <- config file <- explicit CLI flags."""
    merged = RunConfig().to_dict()
    cfg_path = getattr(ns, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    if cfg_path:
        merged.update(load_config_file(cfg_path))
    for key in merged:
        val = getattr(ns, key, None)
        if val is not None:
            merged[key] = val
    return RunConfig.from_dict(merged)


# ---------------------------------------------------------------------------
# Shared command plumbing
# ---------------------------------------------------------------------------

def _montage_cfg(cfg: RunConfig) -> montage.MontageConfig:
    if cfg.montage_preset not in montage.PRESETS:
        raise InvalidConfig(
            f"unknown montage preset {cfg.montage_preset!r}; "
            f"choose from {sorted(montage.PRESETS)}")
    return montage.PRESETS[cfg.montage_preset]


def _backbone_cfg(cfg: RunConfig) -> netspec.BackboneConfig:
    if cfg.model_preset not in netspec.BACKBONE_BUILDERS:
        raise InvalidConfig(
            f"unknown model preset {cfg.model_preset!r}; "
            f"choose from {sorted(netspec.BACKBONE_BUILDERS)}")
    mcfg = _montage_cfg(cfg)
    return netspec.BACKBONE_BUILDERS[cfg.model_preset](mcfg.cube_shape)


def _head_cfg(cfg: RunConfig) -> netspec.HeadConfig:
    return netspec.HEAD_PRESETS[cfg.model_preset]

def _relevant(cfg: RunConfig, command: str) -> dict:
    """The subset of config keys that affect a command's outputs."""
    d = cfg.to_dict()
    keep = {
        "synth": ["seed", "subjects", "samples_per_subject", "sessions",
                  "image_height", "image_width", "warp_amplitude",
                  "brightness_range", "noise_sigma"],
        "preprocess": ["montage_preset"],
        "train-backbone": ["montage_preset", "model_preset", "seed", "margin",
                           "margin_max", "margin_schedule", "mining",
                           "simultaneous_triplets", "lr", "epochs",
                           "batches_per_epoch", "persons_per_batch",
                           "images_per_person"],
        "train-head": ["montage_preset", "model_preset", "seed", "arc_margin",
                       "arc_scale", "freeze_backbone", "lr", "epochs",
                       "batches_per_epoch", "persons_per_batch",
                       "images_per_person"],
        "embed": ["montage_preset", "model_preset"],
        "evaluate": ["gallery_per_subject", "probe_per_subject",
                     "split_method", "seed"],
    }[command]
    return {k: d[k] for k in keep}


def _marker_path(out: Path, command: str) -> Path:
    return out / f".{command}.done.json"


def _already_done(out: Path, command: str, digest: str) -> bool:
    marker = _marker_path(out, command)
    if not marker.exists():
        return False
    try:
        return json.loads(marker.read_text()).get("config_hash") == digest
    except ValueError:
        return False


def _mark_done(out: Path, command: str, digest: str, outputs: list[str]) -> None:
    _marker_path(out, command).write_text(json.dumps(
        {"config_hash": digest, "outputs": outputs}, indent=2, sort_keys=True) + "\n")


def _write_run_manifest(out: Path, command: str, cfg: RunConfig, digest: str,
                        outputs: list[str]) -> None:
    entry = {
        "run_id": f"{command}-{digest[:12]}",
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": digest,
        "outputs": outputs,
        "finished_unix": int(time.time()),
    }
    path = out / "run.json"
    runs = []
    if path.exists():
        try:
            runs = json.loads(path.read_text())
        except ValueError:
            runs = []
    runs.append(entry)
    path.write_text(json.dumps(runs, indent=2, sort_keys=True) + "\n")


def _provider(cfg: RunConfig, ns) -> training.CubeProvider:
    cube_dir = getattr(ns, "cubes", None)
    if cube_dir:
        return training.CubeFileProvider(cube_dir)
    return training.RoiCubeProvider(_montage_cfg(cfg))


def _load_module_from_checkpoint(path, module, prefix: str = "") -> training.TrainState:
    state, params = training.load_checkpoint(path)
    if prefix:
        params = {k[len(prefix):]: v for k, v in params.items()
                  if k.startswith(prefix)}
    training.load_params_into(module, params)
    return state


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, ns) -> None:
    out = Path(ns.out)
    digest = training.config_hash(_relevant(cfg, "synth"))
    if _already_done(out, "synth", digest):
        print(f"synth: {out} already complete, skipping")
        return
    spec = datakit.SynthSpec(
        num_subjects=cfg.subjects, samples_per_subject=cfg.samples_per_subject,
        sessions=cfg.sessions, image_size=(cfg.image_height, cfg.image_width),
        seed=cfg.seed, warp_amplitude=cfg.warp_amplitude,
        brightness_range=cfg.brightness_range, noise_sigma=cfg.noise_sigma)
    manifest = datakit.generate_synthetic(spec, out)
    print(f"synth: wrote {len(manifest)} images for "
          f"{len(manifest.subject_ids)} subjects under {out}")
    _mark_done(out, "synth", digest, [str(out)])
    _write_run_manifest(out, "synth", cfg, digest, [str(out)])


def cmd_preprocess(cfg: RunConfig, ns) -> None:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = _montage_cfg(cfg)
    digest = training.config_hash(_relevant(cfg, "preprocess"))
    if ns.image:
        img = montage.load_roi(ns.image)
        cube = montage.image_to_cube(img, mcfg)
        dest = out / (Path(ns.image).stem + ".cube")
        montage.save_cube(cube, dest)
        print(f"preprocess: {ns.image} -> {dest} shape {cube.data.shape}")
        return
    if not ns.data:
        raise InvalidConfig("preprocess needs --data (image tree) or --image")
    manifest = datakit.load_manifest(ns.data)
    written = skipped = 0
    for rec in manifest.records:
        dest = out / f"{rec.sample_id}.cube"
        if dest.exists():
            skipped += 1
            continue
        dest.parent.mkdir(parents=True, exist_ok=True)
        cube = montage.image_to_cube(montage.load_roi(rec.path, rec.sample_id), mcfg)
        montage.save_cube(cube, dest)
        written += 1
    print(f"preprocess: {written} cubes written, {skipped} already present, "
          f"shape {mcfg.cube_shape}")
    _mark_done(out, "preprocess", digest, [str(out)])
    _write_run_manifest(out, "preprocess", cfg, digest, [str(out)])


def cmd_train_backbone(cfg: RunConfig, ns) -> None:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = training.config_hash(_relevant(cfg, "train-backbone"))
    final = out / "backbone.ckpt"
    if final.exists() and _already_done(out, "train-backbone", digest):
        print(f"train-backbone: {final} already complete, skipping")
        return
    manifest = datakit.load_manifest(ns.data)
    model = network.build_backbone(_backbone_cfg(cfg),
                                   seed=datakit.derive_seed(cfg.seed, "backbone-init"))
    state = training.TrainState(stage="backbone", rng_seed=cfg.seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    state = training.train_backbone(
        manifest, model,
        losses.TripletConfig(margin=cfg.margin, margin_max=cfg.margin_max,
                             mining_policy=cfg.mining,
                             simultaneous_triplets=cfg.simultaneous_triplets,
                             margin_schedule=cfg.margin_schedule),
        training.OptimizerSpec(learning_rate=cfg.lr, max_epochs=cfg.epochs),
        training.BatchSpec(persons_per_batch=cfg.persons_per_batch,
                           images_per_person=cfg.images_per_person,
                           batches_per_epoch=cfg.batches_per_epoch),
        state, _provider(cfg, ns), checkpoint_dir=ckpt_dir,
        log_path=out / "backbone_log.csv", config_digest=digest)
    training.save_checkpoint(state, training.module_params(model), final,
                             config_digest=digest, preset_name=cfg.model_preset)
    mean = float(np.mean(state.loss_history[-cfg.batches_per_epoch:]))
    print(f"train-backbone: {state.epoch} epochs, final-epoch mean loss {mean:.5f}, "
          f"checkpoint {final}")
    _mark_done(out, "train-backbone", digest, [str(final)])
    _write_run_manifest(out, "train-backbone", cfg, digest, [str(final)])


def cmd_train_head(cfg: RunConfig, ns) -> None:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = training.config_hash(_relevant(cfg, "train-head"))
    final = out / "head.ckpt"
    if final.exists() and _already_done(out, "train-head", digest):
        print(f"train-head: {final} already complete, skipping")
        return
    manifest = datakit.load_manifest(ns.data)
    backbone = network.build_backbone(_backbone_cfg(cfg))
    backbone_path = ns.backbone or (out / "backbone.ckpt")
    _load_module_from_checkpoint(backbone_path, backbone)
    head = network.build_head(_head_cfg(cfg),
                              seed=datakit.derive_seed(cfg.seed, "head-init"))
    state = training.TrainState(stage="head", rng_seed=cfg.seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    state = training.train_head(
        manifest, backbone, head,
        losses.ArcConfig(margin=cfg.arc_margin, scale=cfg.arc_scale,
                         num_classes=len(manifest.subject_ids)),
        training.OptimizerSpec(learning_rate=cfg.lr, max_epochs=cfg.epochs),
        training.BatchSpec(persons_per_batch=cfg.persons_per_batch,
                           images_per_person=cfg.images_per_person,
                           batches_per_epoch=cfg.batches_per_epoch),
        state, _provider(cfg, ns), freeze_backbone=cfg.freeze_backbone,
        checkpoint_dir=ckpt_dir, log_path=out / "head_log.csv",
        config_digest=digest)
    training.save_checkpoint(
        state, {f"head.{k}": v for k, v in training.module_params(head).items()},
        final, config_digest=digest, preset_name=cfg.model_preset)
    mean = float(np.mean(state.loss_history[-cfg.batches_per_epoch:]))
    print(f"train-head: {state.epoch} epochs, final-epoch mean loss {mean:.5f}, "
          f"checkpoint {final}")
    _mark_done(out, "train-head", digest, [str(final)])
    _write_run_manifest(out, "train-head", cfg, digest, [str(final)])


def cmd_embed(cfg: RunConfig, ns) -> None:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / "embeddings.npz"
    manifest = datakit.load_manifest(ns.data)
    backbone = network.build_backbone(_backbone_cfg(cfg))
    if ns.backbone:
        _load_module_from_checkpoint(ns.backbone, backbone)
    head = network.build_head(_head_cfg(cfg))
    if ns.head:
        _load_module_from_checkpoint(ns.head, head, prefix="head.")
    provider = _provider(cfg, ns)
    ids, subjects, sessions, vecs = [], [], [], []
    chunk = 32
    for i in range(0, len(manifest.records), chunk):
        batch = list(manifest.records[i:i + chunk])
        emb = network.embed_cubes(backbone, head, provider(batch))
        for rec, e in zip(batch, emb):
            ids.append(rec.sample_id)
            subjects.append(rec.subject_id)
            sessions.append(rec.session_id)
            vecs.append(e)
    np.savez(dest, sample_id=np.array(ids), subject_id=np.array(subjects),
             session_id=np.array(sessions), embedding=np.stack(vecs))
    print(f"embed: {len(ids)} embeddings of dim {vecs[0].shape[0]} -> {dest}")
    digest = training.config_hash(_relevant(cfg, "embed"))
    _write_run_manifest(out, "embed", cfg, digest, [str(dest)])


def _manifest_from_npz(data) -> datakit.DatasetManifest:
    records = tuple(
        datakit.SampleRecord(sid, subj, sess, Path(sid))
        for sid, subj, sess in zip(data["sample_id"], data["subject_id"],
                                   data["session_id"]))
    return datakit.DatasetManifest(root=Path("."), records=records)


def cmd_evaluate(cfg: RunConfig, ns) -> None:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    if ns.scores:
        scores = evaluation.read_scores_csv(ns.scores)
    elif ns.embeddings:
        data = np.load(ns.embeddings, allow_pickle=False)
        manifest = _manifest_from_npz(data)
        split = evaluation.make_split(
            manifest, gallery_per_subject=cfg.gallery_per_subject,
            probe_per_subject=cfg.probe_per_subject, seed=cfg.seed,
            method=cfg.split_method)
        embeddings = {sid: vec for sid, vec in
                      zip(data["sample_id"], data["embedding"])}
        scores = evaluation.score_protocol(embeddings, split)
        if ns.dump_scores:
            evaluation.write_scores_csv(out / "scores.csv", embeddings, split)
    else:
        raise InvalidConfig("evaluate needs --embeddings (npz) or --scores (csv)")
    report = evaluation.verification_report(scores)
    text = evaluation.format_report(report)
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
    evaluation.write_det_csv(out / "det.csv", evaluation.det_curve(scores))
    print(text, end="")
    digest = training.config_hash(_relevant(cfg, "evaluate"))
    _write_run_manifest(out, "evaluate", cfg, digest,
                        [str(out / "report.txt"), str(out / "det.csv")])


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage problems are validation errors: print the flag set, exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"JSON config file (or ${CONFIG_ENV_VAR})")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)


def _add_montage_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--montage-preset", dest="montage_preset", default=None,
                   choices=sorted(montage.PRESETS))
    p.add_argument("--model-preset", dest="model_preset", default=None,
                   choices=sorted(netspec.BACKBONE_BUILDERS))


def _add_train_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="image tree root")
    p.add_argument("--cubes", default=None, help="preprocessed cube dir")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batches-per-epoch", dest="batches_per_epoch",
                   type=int, default=None)
    p.add_argument("--persons-per-batch", dest="persons_per_batch",
                   type=int, default=None)
    p.add_argument("--images-per-person", dest="images_per_person",
                   type=int, default=None)
    _add_montage_model(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crease3d",
                     description="forehead-crease verification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic identity tree")
    _add_common(p)
    p.add_argument("--subjects", type=int, default=None)
    p.add_argument("--samples-per-subject", dest="samples_per_subject",
                   type=int, default=None)
    p.add_argument("--sessions", type=int, default=None)
    p.add_argument("--image-height", dest="image_height", type=int, default=None)
    p.add_argument("--image-width", dest="image_width", type=int, default=None)
    p.add_argument("--warp-amplitude", dest="warp_amplitude", type=float, default=None)
    p.add_argument("--brightness-range", dest="brightness_range",
                   type=float, default=None)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="montage images into cube files")
    _add_common(p)
    p.add_argument("--data", default=None, help="image tree root")
    p.add_argument("--image", default=None, help="single image to convert")
    _add_montage_model(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-backbone", help="stage 1: triplet-mined backbone")
    _add_common(p)
    _add_train_common(p)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--margin-max", dest="margin_max", type=float, default=None)
    p.add_argument("--margin-schedule", dest="margin_schedule", default=None,
                   choices=["constant", "linear-ramp"])
    p.add_argument("--mining", default=None,
                   choices=["batch-all-valid", "batch-hard"])
    p.add_argument("--simultaneous-triplets", dest="simultaneous_triplets",
                   type=int, default=None)
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("train-head", help="stage 2: frozen backbone, ArcFace head")
    _add_common(p)
    _add_train_common(p)
    p.add_argument("--backbone", default=None, help="backbone checkpoint "
                   "(default: <out>/backbone.ckpt)")
    p.add_argument("--arc-margin", dest="arc_margin", type=float, default=None)
    p.add_argument("--arc-scale", dest="arc_scale", type=float, default=None)
    p.add_argument("--no-freeze-backbone", dest="freeze_backbone",
                   action="store_false", default=None)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("embed", help="write per-sample embeddings (npz)")
    _add_common(p)
    p.add_argument("--data", required=True, help="image tree root")
    p.add_argument("--cubes", default=None, help="preprocessed cube dir")
    p.add_argument("--backbone", default=None, help="backbone checkpoint")
    p.add_argument("--head", default=None, help="head checkpoint")
    _add_montage_model(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("evaluate", help="gallery/probe protocol metrics")
    _add_common(p)
    p.add_argument("--embeddings", default=None, help="embeddings npz")
    p.add_argument("--scores", default=None, help="precomputed scores csv")
    p.add_argument("--gallery-per-subject", dest="gallery_per_subject",
                   type=int, default=None)
    p.add_argument("--probe-per-subject", dest="probe_per_subject",
                   type=int, default=None)
    p.add_argument("--split-method", dest="split_method", default=None,
                   choices=["session-aware", "random"])
    p.add_argument("--dump-scores", action="store_true", default=False)
    p.set_defaults(func=cmd_evaluate)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(ns)
        ns.func(cfg, ns)
        return 0
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Crease3dError as e:
        print(f"failure: {e}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError, KeyError) as e:
        print(f"failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
