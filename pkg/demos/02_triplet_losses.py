"""Batch-hard triplet mining, worked by hand on four colinear points.

Four embeddings on a line, two identities, two modalities:

    v1 = 0.0   (identity 1, visible)
    t1 = 1.0   (identity 1, thermal)
    v2 = 2.0   (identity 2, visible)
    t2 = 3.0   (identity 2, thermal)

Per anchor the miner keeps the *farthest* same-identity embedding and the
*nearest* different-identity embedding, then applies a hinge with margin
rho. The cross-modality variant restricts the candidate pool to the other
modality; the intra-modality variant stays inside the anchor's own.
"""

import numpy as np

from xmodal.losses import (
    LabeledBatch,
    LossConfig,
    THERMAL,
    VISIBLE,
    cross_modality_triplet,
    dual_modality_triplet,
    intra_modality_triplet,
)

RHO = 0.5

feats = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
batch = LabeledBatch(
    features=feats,
    identity=np.array([1, 2, 1, 2]),
    modality=np.array([VISIBLE, VISIBLE, THERMAL, THERMAL]),
    P=2,
    K=1,
)

# ---------------------------------------------------------------------------
# Cross-modality mining, anchor by anchor (distances are Euclidean):
#   v1 -> pos t1 (d=1), neg t2 (d=3): hinge(0.5 + 1 - 3) = 0
#   v2 -> pos t2 (d=1), neg t1 (d=1): hinge(0.5 + 1 - 1) = 0.5
#   t1 -> pos v1 (d=1), neg v2 (d=1): hinge(0.5 + 1 - 1) = 0.5
#   t2 -> pos v2 (d=1), neg v1 (d=3): hinge(0.5 + 1 - 3) = 0
# Expected total: 1.0
# ---------------------------------------------------------------------------
l_c, g_c = cross_modality_triplet(batch, RHO)
print("cross-modality loss:", l_c)

# ---------------------------------------------------------------------------
# Intra-modality mining: with one row per (identity, modality), the farthest
# positive is the anchor itself (self-distance ~ 1e-6 from the stabilizer),
# and the nearest negative is 2.0 away, so every hinge is negative. Total: 0.
# ---------------------------------------------------------------------------
l_i, g_i = intra_modality_triplet(batch, RHO)
print("intra-modality loss:", l_i)

# ---------------------------------------------------------------------------
# The dual-modality loss composes the two: L_d = L_c + lambda1 * L_i.
# ---------------------------------------------------------------------------
cfg = LossConfig(rho=RHO, lambda1=0.1)
l_d, g_d, l_c2, l_i2 = dual_modality_triplet(batch, cfg)
print("dual-modality loss:", l_d, "=", l_c2, "+", cfg.lambda1, "*", l_i2)

# The gradient only touches the mined pairs of anchors with an active hinge;
# here that is the v2/t2 <-> t1/v1 cluster, and v1's row only receives
# contributions through being someone else's mined candidate.
print("\ncross-modality gradient:\n", g_c)
