from pathlib import Path

import numpy as np
import pytest
import torch

from crease3d import datakit

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def easy_synth(tmp_path_factory):
    """Small default-jitter identity set shared across tests."""
    spec = datakit.SynthSpec(num_subjects=6, samples_per_subject=6, sessions=2,
                             image_size=(40, 40), seed=3)
    root = tmp_path_factory.mktemp("easy_synth")
    return spec, datakit.generate_synthetic(spec, root)


def make_fake_manifest(num_subjects, per_session, sessions=2):
    """In-memory manifest with nonexistent paths, for sampler/split logic."""
    records = []
    for s in range(num_subjects):
        subject = f"subj{s + 1:03d}"
        for sess in range(sessions):
            for k in range(per_session):
                sid = f"{subject}/session{sess + 1}/img{k + 1:03d}"
                records.append(datakit.SampleRecord(
                    sid, subject, f"session{sess + 1}", Path(sid + ".png")))
    return datakit.DatasetManifest(root=Path("."), records=tuple(records))


class ProceduralCubes:
    """Deterministic per-sample cubes derived from the sample id, no disk."""

    def __init__(self, cube_shape=(8, 16, 16, 3), class_constant=False):
        self.cube_shape = cube_shape
        self.class_constant = class_constant

    def __call__(self, records):
        out = []
        for r in records:
            key = r.subject_id if self.class_constant else r.sample_id
            rng = np.random.default_rng(datakit.derive_seed("cube", key))
            out.append(rng.random(self.cube_shape, dtype=np.float32))
        return np.stack(out)
