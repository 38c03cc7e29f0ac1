"""Online triplet mining on a toy embedding batch.

Stage-1 training scores every (anchor, positive, negative) combination
inside a batch by its cosine-distance hinge and keeps only the violating
ones ("batch-all-valid", the default) or just the hardest positive and
hardest negative per anchor ("batch-hard").  This walks both modes on a
batch small enough to check by eye, then scores the survivors with the
chunked hinge loss that Stage 1 actually optimizes.
"""

import numpy as np
import torch

from crease3d.losses import (TripletConfig, chunked_triplet_loss,
                             mine_triplets, pairwise_cosine_distance)

torch.set_num_threads(1)
rng = np.random.default_rng(4)

# two identities, three samples each, living near opposite prototypes
protos = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
labels = np.array([0, 0, 0, 1, 1, 1])
emb = protos[labels] + 0.25 * rng.standard_normal((6, 3))
emb /= np.linalg.norm(emb, axis=1, keepdims=True)

dist = pairwise_cosine_distance(emb)
print("pairwise cosine distances:")
print(np.round(dist, 3))

# batch-all-valid: every triplet with d(a,p) - d(a,n) + margin > 0, in
# (anchor, positive, negative) index order
cfg = TripletConfig(margin=0.4)
triplets = mine_triplets(emb, labels, cfg)
print(f"\nbatch-all-valid violations at margin {cfg.margin}: {len(triplets)} "
      f"of {6 * 2 * 3} valid combinations")
for a, p, n in triplets[:5]:
    print(f"  ({a},{p},{n}): d_ap={dist[a, p]:.3f}  d_an={dist[a, n]:.3f}  "
          f"hinge={dist[a, p] - dist[a, n] + cfg.margin:.3f}")
if len(triplets) > 5:
    print(f"  ... {len(triplets) - 5} more")

# batch-hard: one triplet per anchor, farthest positive vs nearest negative
hard_cfg = TripletConfig(margin=0.4, mining_policy="batch-hard")
print("\nbatch-hard picks (anchor, farthest positive, nearest negative):")
for a, p, n in mine_triplets(emb, labels, hard_cfg):
    print(f"  ({a},{p},{n})")

# survivors feed a differentiable hinge, averaged as a mean of micro-batch
# means; a wider margin can only mine more and lose more
t = torch.from_numpy(emb)
for m in (0.1, 0.4, 0.8):
    mined = mine_triplets(emb, labels, cfg, margin=m)
    loss = chunked_triplet_loss(t, mined, m, chunk_size=2)
    print(f"margin {m}: {len(mined):2d} triplets, loss {loss.item():.4f}")

# a well-separated batch mines nothing; a training step treats that as
# "record 0.0 and touch no weights"
clean = protos[labels].astype(np.float64)
print("\nperfectly separated batch mines",
      len(mine_triplets(clean, labels, cfg)), "triplets")

# the margin can also ramp linearly over the course of a run
sched = TripletConfig(margin=0.5, margin_max=1.5, margin_schedule="linear-ramp")
print("ramped margin at progress 0 / 0.5 / 1:",
      [round(sched.margin_at(p), 3) for p in (0.0, 0.5, 1.0)])
