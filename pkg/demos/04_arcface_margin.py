"""What the additive angular margin does to a logit.

Stage-2 training classifies unit embeddings against one learned direction
per identity.  The logit for the true class is s * cos(theta + m) instead
of s * cos(theta): the margin m makes the true class harder to win, which
forces embeddings into tighter angular clusters.  Everything here is in
plain numpy trigonometry, then cross-checked against the trainable torch
layer.
"""

import math

import numpy as np
import torch

from crease3d.losses import (ArcConfig, ArcFaceClassifier, arcface_logits,
                             softmax_cross_entropy)

torch.set_num_threads(1)

# two class directions 90 degrees apart, an embedding 30 degrees off class 0
W = np.array([[1.0, 0.0],
              [0.0, 1.0]]).T      # one unit column per class
theta = math.radians(30)
e = np.array([math.cos(theta), math.sin(theta)])

cfg = ArcConfig(margin=0.5, scale=30.0, num_classes=2)
plain = ArcConfig(margin=0.0, scale=30.0, num_classes=2)

z_plain = arcface_logits(e, W, target=0, cfg=plain)
z_margin = arcface_logits(e, W, target=0, cfg=cfg)
print(f"embedding at 30 deg from class 0, 60 deg from class 1")
print(f"  no margin:   logits {np.round(z_plain, 3)}   "
      f"(30*cos(30deg), 30*cos(60deg))")
print(f"  margin 0.5:  logits {np.round(z_margin, 3)}   "
      f"(target becomes 30*cos(30deg + 0.5rad))")
print(f"  loss without margin: {softmax_cross_entropy(z_plain, 0):.4f}")
print(f"  loss with margin:    {softmax_cross_entropy(z_margin, 0):.4f}")

# sweep the angle: the margin shifts where the target stops winning
print("\ntarget logit minus best rival logit, by angle to the true class:")
print("  angle   no margin   margin 0.5")
for deg in (10, 30, 50, 70, 90):
    th = math.radians(deg)
    ev = np.array([math.cos(th), math.sin(th)])
    gap0 = (lambda z: z[0] - z[1])(arcface_logits(ev, W, 0, plain))
    gap1 = (lambda z: z[0] - z[1])(arcface_logits(ev, W, 0, cfg))
    print(f"  {deg:3d}    {gap0:+8.3f}    {gap1:+8.3f}")

# near theta + m = pi the arccos form would bend back; the layer switches
# to the linear penalty cos(theta) - m*sin(m) to stay monotone
far = np.array([-math.cos(0.1), math.sin(0.1)])   # ~174 deg from class 0
z_far = arcface_logits(far, W, target=0, cfg=cfg)
lin = cfg.scale * (float(np.dot(far, W[:, 0])) - cfg.margin * math.sin(cfg.margin))
print(f"\npast the fold: target logit {z_far[0]:.4f} == linear form {lin:.4f}")

# the trainable layer does the same arithmetic on batches, with one
# glorot-initialized weight row per identity that training rotates
layer = ArcFaceClassifier(in_dim=2, cfg=cfg, seed=0).double()
batch = torch.tensor(np.stack([e, far]), dtype=torch.float64)
with torch.no_grad():
    logits = layer(batch, torch.tensor([0, 1]))
print(f"\ntorch layer on a 2-row batch: logits shape {tuple(logits.shape)}")

# with margin 0 and scale 1 the layer is exactly the cosine table
bare = ArcFaceClassifier(in_dim=2, cfg=ArcConfig(margin=0.0, scale=1.0,
                                                 num_classes=2), seed=0).double()
with torch.no_grad():
    bare.weight.copy_(torch.tensor(W.T))
    cosines = bare(batch, torch.tensor([0, 0]))
print("margin 0, scale 1 reduces to plain cosines:")
print(np.round(cosines.numpy(), 4))
