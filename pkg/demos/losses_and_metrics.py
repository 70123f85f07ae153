"""Loss functions and scoring on small hand-made arrays."""

import numpy as np

from affectkit import losses as L
from affectkit import metrics as M
from affectkit.numkit import Tape, Tensor, precision

rng = np.random.default_rng(0)

# cross entropy on probabilities, with and without label smoothing
z = rng.normal(size=(8, 6))
probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
labels = rng.integers(0, 6, 8)
print("ce:", L.weighted_cross_entropy(Tensor(probs.astype(np.float32)), labels).item())
smooth = L.SmoothingConfig(0.2, 6)
print("smoothed targets for class 4:", np.round(smooth.targets([4])[0], 4))
print("smoothed ce:", L.smoothed_cross_entropy(Tensor(probs.astype(np.float32)), labels, smooth).item())

# CCC is 1 for a perfect match and drops with scale or offset errors
t = rng.uniform(-1, 1, 64)
for name, p in [("exact", t), ("halved", t / 2), ("shifted", t + 0.3), ("noise", rng.uniform(-1, 1, 64))]:
    print(f"ccc {name:8s} {M.ccc_metric(p, t):+.4f}")

# the loss gradient, computed in 64-bit
with precision(np.float64):
    pred = Tensor(t / 2, requires_grad=True)
    with Tape() as tape:
        loss = 1 - L.ccc(pred, t)
    tape.backward(loss)
    print("d(1-ccc)/dpred, first 3:", np.round(pred.grad[:3], 4))

# macro F1 and the combined multi-task score
cm = M.confusion([0, 1, 2, 2, 1, 0], [0, 2, 2, 2, 1, 1], 3)
f1, macro = M.f1_scores(cm)
print("per-class f1:", np.round(f1, 3), "macro:", round(macro, 4))
print("p_mtl:", round(M.aggregate_mtl(0.3648, 0.2617, 0.4737), 4))
