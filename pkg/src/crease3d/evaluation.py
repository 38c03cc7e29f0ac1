"""Closed-set gallery/probe verification: splits, scoring, FMR/FNMR metrics.

The decision rule everywhere is "accept iff score >= threshold", with
cosine similarity as the score.  At a threshold t,

    FMR(t)  = fraction of impostor scores >= t
    FNMR(t) = fraction of genuine  scores <  t

and the DET curve sweeps t over every observed score plus -inf/+inf
sentinels, which guarantees the (fmr=1, fnmr=0) and (fmr=0, fnmr=1)
endpoints and therefore an EER crossing.  All metric code is plain numpy
over sorted arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Optional

import numpy as np

from .datakit import DatasetManifest, derive_seed
from .errors import (
    DegenerateEmbedding,
    EmptyScores,
    InsufficientSamples,
    InvalidConfig,
    MissingEmbedding,
)

_NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _NORM_EPS or nb < _NORM_EPS:
        raise DegenerateEmbedding("cosine similarity of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms < _NORM_EPS):
        raise DegenerateEmbedding("zero-norm embedding row")
    return mat / norms


# ---------------------------------------------------------------------------
# Split plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    """Disjoint per-subject gallery/probe sample ids.

    ``reduced`` records subjects whose requested quota could not be met and
    the (gallery, probe) counts actually used.
    """

    gallery: dict[str, tuple[str, ...]]
    probe: dict[str, tuple[str, ...]]
    method: str = "session-aware"
    reduced: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.gallery) != set(self.probe):
            raise InvalidConfig("gallery and probe must cover the same subjects")
        for s in self.gallery:
            overlap = set(self.gallery[s]) & set(self.probe[s])
            if overlap:
                raise InvalidConfig(f"subject {s}: samples in both sides: {overlap}")

    @property
    def subjects(self) -> tuple[str, ...]:
        return tuple(sorted(self.gallery))

    def counts(self) -> tuple[int, int]:
        return (sum(len(v) for v in self.gallery.values()),
                sum(len(v) for v in self.probe.values()))


def _reduce_quota(n_gallery_pool: int, n_probe_pool: int, g: int, p: int,
                  shared_pool: bool) -> tuple[int, int]:
    """Largest feasible (g_i, p_i) <= (g, p), proportional when short."""
    if shared_pool:
        total = n_gallery_pool
        if total >= g + p:
            return g, p
        gi = max(1, round(total * g / (g + p)))
        gi = min(gi, total - 1)
        return gi, total - gi
    return min(g, n_gallery_pool), min(p, n_probe_pool)


def make_split(manifest: DatasetManifest, gallery_per_subject: int = 10,
               probe_per_subject: int = 10, seed: int = 0,
               method: str = "session-aware") -> SplitPlan:
    """Choose per-subject gallery/probe samples.

    "session-aware" (default) draws gallery from each subject's first
    session and probe from the remaining sessions, mirroring an
    enrol-then-return protocol.  "random" pools all of a subject's samples.
    Subjects short of the quota get a proportionally reduced allocation
    (recorded in the plan); subjects that cannot field at least one sample
    on each side raise InsufficientSamples.
    """
    if gallery_per_subject < 1 or probe_per_subject < 1:
        raise InvalidConfig("per-subject quotas must be >= 1")
    if method not in ("session-aware", "random"):
        raise InvalidConfig(f"unknown split method {method!r}")
    gallery: dict[str, tuple[str, ...]] = {}
    probe: dict[str, tuple[str, ...]] = {}
    reduced: dict[str, tuple[int, int]] = {}
    for subject, recs in sorted(manifest.by_subject().items()):
        ids = sorted(r.sample_id for r in recs)
        rng = np.random.default_rng(derive_seed(seed, "split", subject))
        if method == "session-aware":
            sessions = sorted({r.session_id for r in recs})
            if len(sessions) < 2:
                raise InsufficientSamples(
                    f"subject {subject} has one session; session-aware split "
                    "needs an enrol and a return session")
            g_pool = sorted(r.sample_id for r in recs if r.session_id == sessions[0])
            p_pool = sorted(r.sample_id for r in recs if r.session_id != sessions[0])
            if not g_pool or not p_pool:
                raise InsufficientSamples(f"subject {subject}: empty session pool")
            gi, pi = _reduce_quota(len(g_pool), len(p_pool),
                                   gallery_per_subject, probe_per_subject,
                                   shared_pool=False)
            g_sel = [g_pool[i] for i in rng.permutation(len(g_pool))[:gi]]
            p_sel = [p_pool[i] for i in rng.permutation(len(p_pool))[:pi]]
        else:
            if len(ids) < 2:
                raise InsufficientSamples(
                    f"subject {subject} has {len(ids)} sample(s); need >= 2")
            gi, pi = _reduce_quota(len(ids), len(ids), gallery_per_subject,
                                   probe_per_subject, shared_pool=True)
            order = rng.permutation(len(ids))
            g_sel = [ids[i] for i in order[:gi]]
            p_sel = [ids[i] for i in order[gi:gi + pi]]
        if (gi, pi) != (gallery_per_subject, probe_per_subject):
            reduced[subject] = (gi, pi)
        gallery[subject] = tuple(sorted(g_sel))
        probe[subject] = tuple(sorted(p_sel))
    return SplitPlan(gallery=gallery, probe=probe, method=method, reduced=reduced)


# ---------------------------------------------------------------------------
# Protocol scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "genuine",
                           np.asarray(self.genuine, dtype=np.float64).ravel())
        object.__setattr__(self, "impostor",
                           np.asarray(self.impostor, dtype=np.float64).ravel())


class PairCounts(NamedTuple):
    genuine: int
    impostor: int


def protocol_pair_counts(split: SplitPlan) -> PairCounts:
    """Exact pair-descriptor counts, no scores materialized.

    Genuine pairs are all same-subject gallery x probe combinations;
    impostor pairs are all cross-subject ordered (gallery-subject,
    probe-subject) combinations.  For a uniform split this reduces to
    N*g*p and N*(N-1)*g*p.
    """
    subjects = split.subjects
    g = np.array([len(split.gallery[s]) for s in subjects], dtype=np.int64)
    p = np.array([len(split.probe[s]) for s in subjects], dtype=np.int64)
    genuine = int((g * p).sum())
    impostor = int(g.sum() * p.sum() - (g * p).sum())
    return PairCounts(genuine=genuine, impostor=impostor)


def _split_matrices(embeddings: Mapping[str, np.ndarray], split: SplitPlan):
    """Stack split embeddings into unit-row matrices plus label arrays."""
    def stack(side: dict[str, tuple[str, ...]]):
        ids, labels, rows = [], [], []
        for subject in split.subjects:
            for sid in side[subject]:
                if sid not in embeddings:
                    raise MissingEmbedding(f"no embedding for sample {sid}")
                ids.append(sid)
                labels.append(subject)
                rows.append(np.asarray(embeddings[sid], dtype=np.float64))
        return ids, np.array(labels), _unit_rows(np.stack(rows))
    g_ids, g_lab, G = stack(split.gallery)
    p_ids, p_lab, P = stack(split.probe)
    return g_ids, g_lab, G, p_ids, p_lab, P


def score_protocol(embeddings: Mapping[str, np.ndarray],
                   split: SplitPlan) -> ScoreSet:
    """All gallery x probe cosine scores, partitioned genuine/impostor.

    Scores are materialized in subject-sorted, sample-sorted order so the
    result is independent of dict insertion order.  Use
    `protocol_pair_counts` when only the pair arithmetic is needed.
    """
    _, g_lab, G, _, p_lab, P = _split_matrices(embeddings, split)
    scores = G @ P.T
    same = g_lab[:, None] == p_lab[None, :]
    return ScoreSet(genuine=scores[same], impostor=scores[~same])


def iter_score_rows(embeddings: Mapping[str, np.ndarray],
                    split: SplitPlan) -> Iterator[tuple[str, str, str, float]]:
    """(pair_type, gallery_id, probe_id, score) rows, deterministic order."""
    g_ids, g_lab, G, p_ids, p_lab, P = _split_matrices(embeddings, split)
    scores = G @ P.T
    for i, gid in enumerate(g_ids):
        for j, pid in enumerate(p_ids):
            kind = "genuine" if g_lab[i] == p_lab[j] else "impostor"
            yield kind, gid, pid, float(scores[i, j])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetCurve:
    thresholds: np.ndarray   # ascending, with -inf / +inf sentinels
    fmr: np.ndarray          # non-increasing
    fnmr: np.ndarray         # non-decreasing


class OperatingPoint(NamedTuple):
    tmr: float
    threshold: float
    fmr: float
    fnmr: float
    reachable: bool


def det_curve(scores: ScoreSet) -> DetCurve:
    if scores.genuine.size == 0 or scores.impostor.size == 0:
        raise EmptyScores("need nonempty genuine and impostor sets")
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    thresholds = np.concatenate(
        ([-np.inf], np.unique(np.concatenate([gen, imp])), [np.inf]))
    # accept iff score >= t: searchsorted(left) counts strictly-below scores
    fnmr = np.searchsorted(gen, thresholds, side="left") / gen.size
    fmr = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    return DetCurve(thresholds=thresholds, fmr=fmr, fnmr=fnmr)


def eer(curve: DetCurve) -> float:
    """Midpoint of (fmr, fnmr) at the linear-interpolated crossing.

    fmr - fnmr is monotone non-increasing and the sentinels pin it to +1
    at -inf and -1 at +inf, so a sign change always exists.  An exact zero
    is returned as-is; otherwise interpolate between the last positive and
    first negative point.
    """
    diff = curve.fmr - curve.fnmr
    zeros = np.flatnonzero(diff == 0.0)
    if zeros.size:
        k = int(zeros[0])
        return float((curve.fmr[k] + curve.fnmr[k]) / 2.0)
    k = int(np.flatnonzero(diff > 0.0)[-1])
    lam = diff[k] / (diff[k] - diff[k + 1])
    fmr_x = curve.fmr[k] + lam * (curve.fmr[k + 1] - curve.fmr[k])
    fnmr_x = curve.fnmr[k] + lam * (curve.fnmr[k + 1] - curve.fnmr[k])
    return float((fmr_x + fnmr_x) / 2.0)


def tmr_at_fmr(curve: DetCurve, target_fmr: float) -> OperatingPoint:
    """TMR at the smallest threshold whose FMR meets the target.

    No interpolation: the returned point is an actually attainable
    operating threshold.  When only the reject-everything sentinel meets
    the target the point is flagged ``reachable=False`` (tmr 0).
    """
    if not 0.0 < target_fmr < 1.0:
        raise InvalidConfig(f"target_fmr must be in (0, 1), got {target_fmr}")
    idx = int(np.flatnonzero(curve.fmr <= target_fmr)[0])
    reachable = idx < curve.thresholds.size - 1
    return OperatingPoint(
        tmr=float(1.0 - curve.fnmr[idx]),
        threshold=float(curve.thresholds[idx]),
        fmr=float(curve.fmr[idx]),
        fnmr=float(curve.fnmr[idx]),
        reachable=reachable,
    )


# ---------------------------------------------------------------------------
# Files and reports
# ---------------------------------------------------------------------------

SCORE_HEADER = ["pair_type", "gallery_id", "probe_id", "score"]
DET_HEADER = ["threshold", "fmr", "fnmr"]


def write_scores_csv(path, embeddings: Mapping[str, np.ndarray],
                     split: SplitPlan) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_HEADER)
        for row in iter_score_rows(embeddings, split):
            w.writerow([row[0], row[1], row[2], f"{row[3]:.17g}"])


def read_scores_csv(path) -> ScoreSet:
    genuine, impostor = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORE_HEADER:
            raise InvalidConfig(
                f"score file {path} header {reader.fieldnames} != {SCORE_HEADER}")
        for row in reader:
            if row["pair_type"] == "genuine":
                genuine.append(float(row["score"]))
            elif row["pair_type"] == "impostor":
                impostor.append(float(row["score"]))
            else:
                raise InvalidConfig(f"unknown pair_type {row['pair_type']!r}")
    return ScoreSet(genuine=np.array(genuine), impostor=np.array(impostor))


def write_det_csv(path, curve: DetCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DET_HEADER)
        for t, a, r in zip(curve.thresholds, curve.fmr, curve.fnmr):
            w.writerow([f"{t:.17g}", f"{a:.17g}", f"{r:.17g}"])


def verification_report(scores: ScoreSet,
                        tmr_targets: tuple[float, ...] = (1e-3, 1e-4)) -> dict:
    curve = det_curve(scores)
    report = {
        "num_genuine": int(scores.genuine.size),
        "num_impostor": int(scores.impostor.size),
        "eer": eer(curve),
        "tmr_at_fmr": {},
    }
    for target in tmr_targets:
        op = tmr_at_fmr(curve, target)
        report["tmr_at_fmr"][target] = {
            "tmr": op.tmr, "threshold": op.threshold, "fmr": op.fmr,
            "fnmr": op.fnmr, "reachable": op.reachable,
        }
    return report


def format_report(report: dict) -> str:
    lines = [
        "verification report",
        f"  genuine pairs:  {report['num_genuine']}",
        f"  impostor pairs: {report['num_impostor']}",
        f"  EER: {report['eer']:.6f} ({report['eer'] * 100:.4f}%)",
    ]
    for target, op in sorted(report["tmr_at_fmr"].items(), reverse=True):
        note = "" if op["reachable"] else "  [target FMR not attainable]"
        lines.append(
            f"  TMR@FMR<={target:g}: {op['tmr']:.6f} "
            f"(threshold {op['threshold']:.6f}, fmr {op['fmr']:.3g}){note}")
    return "\n".join(lines) + "\n"
