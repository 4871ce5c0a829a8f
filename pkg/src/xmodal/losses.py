"""Batch-hard triplet losses over two modalities and the full training loss.

All triplet losses are sums over anchors, each term
[margin + hardest-positive distance - hardest-negative distance]_+,
with hardest pairs mined inside the batch. Gradients flow only through
the selected pair of anchors whose hinge is strictly active. Ties in the
hardest-pair selection break toward the lowest row index.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import (
    l2_normalize_backward,
    l2_normalize_forward,
    pairwise_distances,
    softmax_cross_entropy,
)

VISIBLE = "V"
THERMAL = "T"


@dataclass
class LossConfig:
    rho: float = 0.5
    lambda1: float = 0.1
    lambda2: float = 2.0
    mfi_enabled: bool = True
    backbone_loss_enabled: bool = True

    def validate(self):
        if self.rho < 0.0:
            raise ValueError("LossConfig: rho must be >= 0")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise ValueError("LossConfig: lambda1 and lambda2 must be >= 0")


@dataclass
class LabeledBatch:
    """A 2*P*K block of rows: K per (identity, modality) for P identities."""

    features: np.ndarray
    identity: np.ndarray
    modality: np.ndarray  # entries VISIBLE / THERMAL
    P: int
    K: int

    def validate(self):
        n = self.features.shape[0]
        if n != 2 * self.P * self.K:
            raise ValueError(f"LabeledBatch: expected {2 * self.P * self.K} rows, got {n}")
        if self.identity.shape != (n,) or self.modality.shape != (n,):
            raise ValueError("LabeledBatch: label arrays must match row count")
        idents = np.unique(self.identity)
        if idents.size != self.P:
            raise ValueError(f"LabeledBatch: expected {self.P} identities, got {idents.size}")
        for ident in idents:
            for mod in (VISIBLE, THERMAL):
                count = int(np.sum((self.identity == ident) & (self.modality == mod)))
                if count != self.K:
                    raise ValueError(
                        f"LabeledBatch: identity {ident} has {count} {mod} rows, expected {self.K}")


def _mined_hinge(features, labels, anchor_idx, cand_idx, rho):
    """Batch-hard hinge over given anchor rows against a candidate pool.

    Positives/negatives are candidate rows with equal/different labels.
    Returns (loss, grad w.r.t. the full feature matrix).
    """
    anchor_idx = np.asarray(anchor_idx, dtype=np.intp)
    cand_idx = np.asarray(cand_idx, dtype=np.intp)
    dist = pairwise_distances(features[anchor_idx], features[cand_idx])
    cand_labels = labels[cand_idx]
    loss = 0.0
    grad = np.zeros_like(features)
    for ai, a in enumerate(anchor_idx):
        same = cand_labels == labels[a]
        if not np.any(same):
            raise ValueError(f"no positive candidates for anchor row {a}")
        if np.all(same):
            raise ValueError(f"no negative candidates for anchor row {a}")
        d = dist[ai]
        # argmax/argmin take the lowest index on ties
        hp = int(np.argmax(np.where(same, d, -np.inf)))
        hn = int(np.argmin(np.where(same, np.inf, d)))
        term = rho + d[hp] - d[hn]
        if term <= 0.0:
            continue
        loss += term
        p = cand_idx[hp]
        n = cand_idx[hn]
        # d = sqrt(||f_a - f_b||^2 + eps), so dd/df_a = (f_a - f_b) / d
        gp = (features[a] - features[p]) / d[hp]
        gn = (features[a] - features[n]) / d[hn]
        grad[a] += gp - gn
        grad[p] -= gp
        grad[n] += gn
    return loss, grad


def _margin_of(features, labels, anchor_idx, cand_idx, rho):
    """Distance of each anchor's hinge term and mined selections from a kink."""
    anchor_idx = np.asarray(anchor_idx, dtype=np.intp)
    cand_idx = np.asarray(cand_idx, dtype=np.intp)
    dist = pairwise_distances(features[anchor_idx], features[cand_idx])
    cand_labels = labels[cand_idx]
    margin = np.inf
    for ai, a in enumerate(anchor_idx):
        same = cand_labels == labels[a]
        d = dist[ai]
        pos = np.sort(d[same])[::-1]
        neg = np.sort(d[~same])
        margin = min(margin, abs(rho + pos[0] - neg[0]))
        if pos.size > 1:
            margin = min(margin, pos[0] - pos[1])
        if neg.size > 1:
            margin = min(margin, neg[1] - neg[0])
    return margin


def mining_margins(batch, rho):
    """Smallest kink distance over plain, cross, and intra minings of a batch.

    Used by gradient checks to reject batches where the piecewise loss is
    (nearly) nondifferentiable.
    """
    feats, labels = batch.features, batch.identity
    idx = np.arange(feats.shape[0])
    vis = np.flatnonzero(batch.modality == VISIBLE)
    thm = np.flatnonzero(batch.modality == THERMAL)
    margins = [
        _margin_of(feats, labels, idx, idx, rho),
        _margin_of(feats, labels, vis, thm, rho),
        _margin_of(feats, labels, thm, vis, rho),
        _margin_of(feats, labels, vis, vis, rho),
        _margin_of(feats, labels, thm, thm, rho),
    ]
    return min(margins)


def batch_hard_triplet(features, labels, rho):
    """Plain batch-hard triplet loss: every row anchors against the whole batch."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("batch_hard_triplet: need at least 2 identities")
    idx = np.arange(features.shape[0])
    return _mined_hinge(features, labels, idx, idx, rho)


def cross_modality_triplet(batch, rho):
    """Bi-directional cross-modality loss: anchors in one modality, pool in the other."""
    batch.validate()
    vis = np.flatnonzero(batch.modality == VISIBLE)
    thm = np.flatnonzero(batch.modality == THERMAL)
    if vis.size == 0 or thm.size == 0:
        raise ValueError("cross_modality_triplet: both modalities must be present")
    loss_vt, grad_vt = _mined_hinge(batch.features, batch.identity, vis, thm, rho)
    loss_tv, grad_tv = _mined_hinge(batch.features, batch.identity, thm, vis, rho)
    return loss_vt + loss_tv, grad_vt + grad_tv


def intra_modality_triplet(batch, rho):
    """Per-modality batch-hard loss, summed over the two modalities."""
    batch.validate()
    total = 0.0
    grad = np.zeros_like(batch.features)
    for mod in (VISIBLE, THERMAL):
        idx = np.flatnonzero(batch.modality == mod)
        if np.unique(batch.identity[idx]).size < 2:
            raise ValueError(f"intra_modality_triplet: fewer than 2 identities in modality {mod}")
        loss, g = _mined_hinge(batch.features, batch.identity, idx, idx, rho)
        total += loss
        grad += g
    return total, grad


def dual_modality_triplet(batch, config):
    """cross + lambda1 * intra, with matching gradient composition."""
    config.validate()
    loss_c, grad_c = cross_modality_triplet(batch, config.rho)
    loss_i, grad_i = intra_modality_triplet(batch, config.rho)
    return loss_c + config.lambda1 * loss_i, grad_c + config.lambda1 * grad_i, loss_c, loss_i


@dataclass
class BundleGrads:
    """Gradients flowing back into one modality's encoder outputs."""

    d_v_post: np.ndarray
    d_logits_backbone: np.ndarray
    d_v_fused_post: np.ndarray | None = None
    d_logits_skip: np.ndarray | None = None


@dataclass
class LossBreakdown:
    softmax: float
    backbone: float
    cross: float
    intra: float
    dual: float
    total: float

    def as_dict(self):
        return {
            "L_softmax": self.softmax,
            "L_backbone": self.backbone,
            "L_c_tri": self.cross,
            "L_i_tri": self.intra,
            "L_d_tri": self.dual,
            "L_all": self.total,
        }


def total_loss(bundle_v, bundle_t, labels_v, labels_t, config, P, K):
    """Final training loss over one PK batch encoded per modality.

    Metric features for the triplet terms are the L2-normalized selected
    features (skip branch when MFI is on, backbone otherwise); the softmax
    term uses the matching classifier logits. Returns the breakdown plus
    per-modality gradients on the encoder outputs.
    """
    config.validate()
    nv = bundle_v.v_post.shape[0]
    nt = bundle_t.v_post.shape[0]
    labels_v = np.asarray(labels_v, dtype=np.intp)
    labels_t = np.asarray(labels_t, dtype=np.intp)
    labels = np.concatenate([labels_v, labels_t])

    if config.mfi_enabled:
        sel_v, sel_t = bundle_v.v_fused_post, bundle_t.v_fused_post
        logits = np.concatenate([bundle_v.logits_skip, bundle_t.logits_skip])
    else:
        sel_v, sel_t = bundle_v.v_post, bundle_t.v_post
        logits = np.concatenate([bundle_v.logits_backbone, bundle_t.logits_backbone])

    sel = np.concatenate([sel_v, sel_t])
    metric, norm_cache = l2_normalize_forward(sel)
    modality = np.array([VISIBLE] * nv + [THERMAL] * nt)
    batch = LabeledBatch(features=metric, identity=labels, modality=modality, P=P, K=K)

    loss_sm, d_logits = softmax_cross_entropy(logits, labels)
    loss_d, d_metric, loss_c, loss_i = dual_modality_triplet(batch, config)
    d_sel = l2_normalize_backward(norm_cache, config.lambda2 * d_metric)

    total = loss_sm + config.lambda2 * loss_d
    loss_bb = 0.0
    d_logits_bb = None
    if config.mfi_enabled and config.backbone_loss_enabled:
        logits_bb = np.concatenate([bundle_v.logits_backbone, bundle_t.logits_backbone])
        loss_bb, d_logits_bb = softmax_cross_entropy(logits_bb, labels)
        total += loss_bb

    zeros_v = np.zeros_like(bundle_v.v_post)
    zeros_t = np.zeros_like(bundle_t.v_post)
    zl_v = np.zeros_like(bundle_v.logits_backbone)
    zl_t = np.zeros_like(bundle_t.logits_backbone)
    if config.mfi_enabled:
        grads_v = BundleGrads(
            d_v_post=zeros_v,
            d_logits_backbone=d_logits_bb[:nv] if d_logits_bb is not None else zl_v,
            d_v_fused_post=d_sel[:nv],
            d_logits_skip=d_logits[:nv],
        )
        grads_t = BundleGrads(
            d_v_post=zeros_t,
            d_logits_backbone=d_logits_bb[nv:] if d_logits_bb is not None else zl_t,
            d_v_fused_post=d_sel[nv:],
            d_logits_skip=d_logits[nv:],
        )
    else:
        grads_v = BundleGrads(d_v_post=d_sel[:nv], d_logits_backbone=d_logits[:nv])
        grads_t = BundleGrads(d_v_post=d_sel[nv:], d_logits_backbone=d_logits[nv:])

    breakdown = LossBreakdown(
        softmax=loss_sm, backbone=loss_bb, cross=loss_c, intra=loss_i,
        dual=loss_d, total=total)
    return breakdown, grads_v, grads_t
