"""Verification metrics from first principles: DET, EER, TMR at fixed FMR.

A closed-set protocol compares every probe against every gallery sample.
Same-subject comparisons are genuine scores, the rest impostor scores, and
every metric is a function of those two score piles.  This builds a score
set tiny enough to sweep by hand, checks the curve against intuition, then
reads operating points off a larger simulated matcher.
"""

import numpy as np

from crease3d.evaluation import (DetCurve, OperatingPoint, ScoreSet,
                                 SplitPlan, det_curve, eer, format_report,
                                 protocol_pair_counts, score_protocol,
                                 tmr_at_fmr, verification_report)

# --- protocol scoring on a hand-made split ------------------------------
# two subjects, two gallery + one probe sample each, 3-dim embeddings
emb = {
    "a/g1": np.array([1.0, 0.0, 0.0]),
    "a/g2": np.array([0.9, 0.1, 0.0]),
    "a/p1": np.array([0.8, 0.0, 0.2]),
    "b/g1": np.array([0.0, 1.0, 0.0]),
    "b/g2": np.array([0.0, 0.9, 0.1]),
    "b/p1": np.array([0.1, 0.9, 0.0]),
}
split = SplitPlan(
    gallery={"a": ("a/g1", "a/g2"), "b": ("b/g1", "b/g2")},
    probe={"a": ("a/p1",), "b": ("b/p1",)},
)
counts = protocol_pair_counts(split)
scores = score_protocol(emb, split)
print(f"pairs: {counts.genuine} genuine, {counts.impostor} impostor")
print(f"genuine scores:  {np.round(np.sort(scores.genuine)[::-1], 3)}")
print(f"impostor scores: {np.round(np.sort(scores.impostor)[::-1], 3)}")

# --- the DET curve on six hand scores -----------------------------------
# interleaved piles force errors on both sides of any threshold
hand = ScoreSet(genuine=[0.8, 0.6, 0.4], impostor=[0.7, 0.5, 0.3])
curve = det_curve(hand)
print("\nthreshold sweep (accept iff score >= t):")
print("  t        FMR    FNMR")
for t, fm, fn in zip(curve.thresholds, curve.fmr, curve.fnmr):
    print(f"  {t:>5}   {fm:.3f}   {fn:.3f}")
print(f"EER by interpolation between the crossing points: {eer(curve):.6f}"
      f"  (exactly 1/3)")

# --- operating points on a simulated matcher ----------------------------
rng = np.random.default_rng(7)
sim = ScoreSet(genuine=rng.normal(0.75, 0.12, 4000),
               impostor=rng.normal(0.25, 0.15, 100_000))
sim_curve = det_curve(sim)
print(f"\nsimulated matcher, 4k genuine / 100k impostor: "
      f"EER {eer(sim_curve):.4f}")
for target in (1e-2, 1e-3, 1e-4):
    op: OperatingPoint = tmr_at_fmr(sim_curve, target)
    print(f"  FMR <= {target:g}: TMR {op.tmr:.4f} at threshold "
          f"{op.threshold:.4f} (actual FMR {op.fmr:.2e})")

# when one impostor outscores every genuine pair, the only threshold with
# FMR <= 1e-3 rejects everything; the operating point says so instead of
# interpolating a number nothing could attain
small = det_curve(ScoreSet(genuine=[0.4, 0.5, 0.6], impostor=[0.3, 0.45, 0.7]))
op = tmr_at_fmr(small, 1e-3)
print(f"\ntop impostor beats top genuine, FMR <= 1e-3: tmr {op.tmr}, "
      f"threshold {op.threshold}, reachable={op.reachable}")

# the standard report bundles the lot
print("\n" + format_report(verification_report(sim)))
