"""Dataset ingestion and a seeded synthetic crease-image generator.

Real data is a plug-in directory tree shaped ``root/subject/session/image``;
`load_manifest` walks it into a deterministic, lexicographically ordered
manifest.  For desk-scale runs `generate_synthetic` renders per-identity
crease patterns (oriented dark bands over a smooth background) with
per-sample elastic warp, brightness jitter, and sensor noise.  All
randomness flows from per-item seeds derived by hashing, so generation
order or parallelism can never change the output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import EmptyDataset, InvalidConfig, IoFailure, MalformedLayout

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class SampleRecord(NamedTuple):
    sample_id: str      # "subject/session/stem", unique within a manifest
    subject_id: str
    session_id: str
    path: Path


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    records: tuple[SampleRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(sorted({r.subject_id for r in self.records}))

    def by_subject(self) -> dict[str, list[SampleRecord]]:
        out: dict[str, list[SampleRecord]] = {}
        for r in self.records:
            out.setdefault(r.subject_id, []).append(r)
        return out

    def sessions_of(self, subject_id: str) -> tuple[str, ...]:
        return tuple(sorted({r.session_id for r in self.records
                             if r.subject_id == subject_id}))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of values (hash of their repr)."""
    h = hashlib.sha256("\x1f".join(repr(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


def load_manifest(root_path) -> DatasetManifest:
    """Walk ``root/subject/session/image`` into an ordered manifest.

    Non-image files (index caches, sidecars) are ignored; image files at
    any other depth raise MalformedLayout; an image-free tree raises
    EmptyDataset.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise EmptyDataset(f"{root} is not a directory")
    stray = [p for p in root.rglob("*")
             if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
             and len(p.relative_to(root).parts) != 3]
    if stray:
        raise MalformedLayout(
            f"image files outside subject/session/image layout, e.g. {stray[0]}")
    records = []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for session_dir in sorted(p for p in subject_dir.iterdir() if p.is_dir()):
            for img in sorted(session_dir.iterdir()):
                if img.is_file() and img.suffix.lower() in IMAGE_SUFFIXES:
                    sid = f"{subject_dir.name}/{session_dir.name}/{img.stem}"
                    records.append(SampleRecord(sid, subject_dir.name,
                                                session_dir.name, img))
    if not records:
        raise EmptyDataset(f"no {'/'.join(IMAGE_SUFFIXES)} files under {root}")
    return DatasetManifest(root=root, records=tuple(records))


def write_manifest_index(manifest: DatasetManifest, path=None) -> Path:
    """Cache the manifest as JSON next to the data (informational)."""
    path = Path(path) if path else manifest.root / "manifest.json"
    payload = {
        "root": str(manifest.root),
        "num_records": len(manifest),
        "num_subjects": len(manifest.subject_ids),
        "records": [
            {"sample_id": r.sample_id, "subject_id": r.subject_id,
             "session_id": r.session_id, "path": str(r.path)}
            for r in manifest.records
        ],
    }
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write manifest index {path}: {e}") from e
    return path


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Controls the synthetic identity set.

    ``samples_per_subject`` is the total per subject, split as evenly as
    possible across ``sessions``.  The three jitter knobs drive intra-class
    variation; zeroing all of them makes every sample of a subject
    identical.
    """

    num_subjects: int = 20
    samples_per_subject: int = 10
    sessions: int = 2
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    warp_amplitude: float = 2.0
    brightness_range: float = 0.12
    noise_sigma: float = 0.02
    creases_min: int = 3
    creases_max: int = 6

    def __post_init__(self):
        if min(self.num_subjects, self.samples_per_subject, self.sessions) < 1:
            raise InvalidConfig("counts must be >= 1")
        if min(self.image_size) < 8:
            raise InvalidConfig("image_size too small")
        if min(self.warp_amplitude, self.brightness_range, self.noise_sigma) < 0:
            raise InvalidConfig("jitter amplitudes must be >= 0")
        if not 1 <= self.creases_min <= self.creases_max:
            raise InvalidConfig("need 1 <= creases_min <= creases_max")

    def session_counts(self) -> list[int]:
        base, extra = divmod(self.samples_per_subject, self.sessions)
        return [base + (1 if i < extra else 0) for i in range(self.sessions)]


def _base_pattern(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One subject's identity: smooth skin background minus oriented bands."""
    h, w = spec.image_size
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    gx, gy = rng.uniform(-0.15, 0.15, size=2)
    base = 0.62 + gx * (xx - 0.5) + gy * (yy - 0.5)
    n_creases = int(rng.integers(spec.creases_min, spec.creases_max + 1))
    for _ in range(n_creases):
        kind = rng.choice(["horizontal", "vertical", "diagonal"])
        offset = rng.uniform(0.15, 0.85)
        curve = rng.uniform(-0.25, 0.25)
        slope = {"horizontal": rng.uniform(-0.1, 0.1),
                 "vertical": rng.uniform(-0.1, 0.1),
                 "diagonal": rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])}[kind]
        width = rng.uniform(0.012, 0.035)
        depth = rng.uniform(0.18, 0.42)
        if kind == "vertical":
            d = xx - (offset + slope * (yy - 0.5) + curve * (yy - 0.5) ** 2)
        else:
            d = yy - (offset + slope * (xx - 0.5) + curve * (xx - 0.5) ** 2)
        base = base - depth * np.exp(-((d / width) ** 2))
    return np.clip(base, 0.0, 1.0)


def _jitter_sample(base: np.ndarray, spec: SynthSpec,
                   rng: np.random.Generator) -> np.ndarray:
    img = base
    if spec.warp_amplitude > 0:
        h, w = img.shape
        # smooth random displacement field, order-1 resample
        dy = gaussian_filter(rng.standard_normal((h, w)), sigma=8.0)
        dx = gaussian_filter(rng.standard_normal((h, w)), sigma=8.0)
        for d in (dy, dx):
            peak = np.abs(d).max()
            if peak > 0:
                d *= spec.warp_amplitude / peak
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        img = map_coordinates(img, [yy + dy, xx + dx], order=1, mode="reflect")
    if spec.brightness_range > 0:
        img = img * (1.0 + rng.uniform(-spec.brightness_range, spec.brightness_range))
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SynthSpec, out_path) -> DatasetManifest:
    """Render the full identity tree under ``out_path`` and manifest it.

    Every image is a pure function of (spec.seed, subject, session, index),
    so regeneration is bitwise identical regardless of order.
    """
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        per_session = spec.session_counts()
        for si in range(spec.num_subjects):
            subject = f"subj{si + 1:03d}"
            base = _base_pattern(
                spec, np.random.default_rng(derive_seed(spec.seed, "subject", si)))
            for sess in range(spec.sessions):
                sess_dir = out / subject / f"session{sess + 1}"
                sess_dir.mkdir(parents=True, exist_ok=True)
                for k in range(per_session[sess]):
                    rng = np.random.default_rng(
                        derive_seed(spec.seed, "sample", si, sess, k))
                    img = _jitter_sample(base, spec, rng)
                    gray = np.round(img * 255.0).astype(np.uint8)
                    rgb = np.repeat(gray[:, :, None], 3, axis=2)
                    Image.fromarray(rgb, mode="RGB").save(
                        sess_dir / f"img{k + 1:03d}.png")
    except OSError as e:
        raise IoFailure(f"synthetic generation under {out} failed: {e}") from e
    manifest = load_manifest(out)
    write_manifest_index(manifest)
    return manifest
