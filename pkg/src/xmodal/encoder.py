"""Two-stream dense encoder with a shared head and a mid-level skip-fusion branch.

Each modality owns its Dense+ReLU stage stack; the bottleneck, batchnorm,
and classifiers are shared across modalities. When the skip branch is
enabled, the activation of the tap stage is projected and fused with the
pre-batchnorm bottleneck feature (elementwise sum, or concatenation with
the projected mid feature first).
"""

from dataclasses import dataclass

import numpy as np

from .numerics import (
    batchnorm_backward,
    batchnorm_forward,
    dense_backward,
    dense_forward,
    l2_normalize_forward,
    relu_backward,
    relu_forward,
)

MODALITIES = ("visible", "thermal")


@dataclass
class EncoderConfig:
    input_dim: int
    num_classes: int
    stage_dims: tuple = (64, 64, 64)
    tap_stage: int = 3
    d: int = 1024
    fusion: str = "cat"
    mfi_enabled: bool = True
    backbone_loss_enabled: bool = True
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self):
        if self.input_dim < 1 or self.d < 1:
            raise ValueError("EncoderConfig: dims must be >= 1")
        if self.num_classes < 2 and self.num_classes != 0:
            raise ValueError("EncoderConfig: num_classes must be >= 2, or 0 to infer from data")
        if not self.stage_dims or any(s < 1 for s in self.stage_dims):
            raise ValueError("EncoderConfig: stage_dims must be positive")
        if not 1 <= self.tap_stage <= len(self.stage_dims):
            raise ValueError("EncoderConfig: tap_stage out of range")
        if self.fusion not in ("sum", "cat"):
            raise ValueError("EncoderConfig: fusion must be 'sum' or 'cat'")
        if self.bn_epsilon <= 0.0 or not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("EncoderConfig: bad batchnorm settings")

    @property
    def fused_dim(self):
        return 2 * self.d if self.fusion == "cat" else self.d

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "stage_dims": list(self.stage_dims),
            "tap_stage": self.tap_stage,
            "d": self.d,
            "fusion": self.fusion,
            "mfi_enabled": self.mfi_enabled,
            "backbone_loss_enabled": self.backbone_loss_enabled,
            "bn_epsilon": self.bn_epsilon,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"EncoderConfig: unknown keys {sorted(unknown)}")
        d = dict(d)
        if "stage_dims" in d:
            d["stage_dims"] = tuple(d["stage_dims"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class EncoderParams:
    """Trainable arrays by name, plus non-trainable batchnorm running stats."""

    values: dict
    bn_state: dict

    def copy(self):
        return EncoderParams(
            values={k: v.copy() for k, v in self.values.items()},
            bn_state={k: v.copy() for k, v in self.bn_state.items()},
        )


@dataclass
class FeatureBundle:
    """Batched encoder outputs for one modality sub-batch."""

    v_pre: np.ndarray
    v_post: np.ndarray
    logits_backbone: np.ndarray
    v_mid: np.ndarray | None = None
    v_fused: np.ndarray | None = None
    v_fused_post: np.ndarray | None = None
    logits_skip: np.ndarray | None = None


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_encoder(config, seed):
    """Scaled-uniform Dense weights, zero biases, unit/zero batchnorm affine."""
    config.validate()
    rng = np.random.default_rng(seed)
    values = {}
    bn_state = {}
    for mod in MODALITIES:
        in_dim = config.input_dim
        for i, out_dim in enumerate(config.stage_dims, start=1):
            values[f"{mod}.stage{i}.W"] = _glorot(rng, in_dim, out_dim)
            values[f"{mod}.stage{i}.b"] = np.zeros(out_dim)
            in_dim = out_dim
    last = config.stage_dims[-1]
    values["head.fc.W"] = _glorot(rng, last, config.d)
    values["head.fc.b"] = np.zeros(config.d)
    values["head.bn.gamma"] = np.ones(config.d)
    values["head.bn.beta"] = np.zeros(config.d)
    values["head.cls.W"] = _glorot(rng, config.d, config.num_classes)
    values["head.cls.b"] = np.zeros(config.num_classes)
    bn_state["head.bn.running_mean"] = np.zeros(config.d)
    bn_state["head.bn.running_var"] = np.ones(config.d)
    if config.mfi_enabled:
        tap_dim = config.stage_dims[config.tap_stage - 1]
        values["mid.fc.W"] = _glorot(rng, tap_dim, config.d)
        values["mid.fc.b"] = np.zeros(config.d)
        values["mid.bn.gamma"] = np.ones(config.fused_dim)
        values["mid.bn.beta"] = np.zeros(config.fused_dim)
        values["mid.cls.W"] = _glorot(rng, config.fused_dim, config.num_classes)
        values["mid.cls.b"] = np.zeros(config.num_classes)
        bn_state["mid.bn.running_mean"] = np.zeros(config.fused_dim)
        bn_state["mid.bn.running_var"] = np.ones(config.fused_dim)
    return EncoderParams(values=values, bn_state=bn_state)


def fuse(v_mid, v_pre, mode):
    """sum: elementwise addition; cat: concatenation with the mid feature first."""
    v_mid = np.asarray(v_mid, dtype=np.float64)
    v_pre = np.asarray(v_pre, dtype=np.float64)
    if mode == "sum":
        if v_mid.shape != v_pre.shape:
            raise ValueError("fuse: sum requires equal dims")
        return v_mid + v_pre
    if mode == "cat":
        return np.concatenate([v_mid, v_pre], axis=-1)
    raise ValueError(f"fuse: unknown mode {mode!r}")


def encode(params, config, x, modality, mode="train"):
    """Run one modality's rows through its stream and the shared layers.

    Returns (FeatureBundle, cache). Train mode uses batch statistics in the
    batchnorm layers and updates their running stats in place; eval mode is
    pure and reads running stats only.
    """
    if modality not in MODALITIES:
        raise ValueError(f"encode: unknown modality {modality!r}")
    if mode not in ("train", "eval"):
        raise ValueError(f"encode: unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"encode: input shape {x.shape} does not match input_dim {config.input_dim}")
    train = mode == "train"
    v = params.values

    h = x
    stage_caches = []
    tap = None
    for i in range(1, len(config.stage_dims) + 1):
        z, dcache = dense_forward(h, v[f"{modality}.stage{i}.W"], v[f"{modality}.stage{i}.b"])
        h, rcache = relu_forward(z)
        stage_caches.append((dcache, rcache))
        if i == config.tap_stage:
            tap = h

    v_pre, head_fc_cache = dense_forward(h, v["head.fc.W"], v["head.fc.b"])
    v_post, head_bn_cache = batchnorm_forward(
        v_pre, v["head.bn.gamma"], v["head.bn.beta"],
        params.bn_state["head.bn.running_mean"], params.bn_state["head.bn.running_var"],
        eps=config.bn_epsilon, momentum=config.bn_momentum, train=train)
    logits_backbone, head_cls_cache = dense_forward(v_post, v["head.cls.W"], v["head.cls.b"])

    bundle = FeatureBundle(v_pre=v_pre, v_post=v_post, logits_backbone=logits_backbone)
    mid_caches = None
    if config.mfi_enabled:
        v_mid, mid_fc_cache = dense_forward(tap, v["mid.fc.W"], v["mid.fc.b"])
        v_fused = fuse(v_mid, v_pre, config.fusion)
        v_fused_post, mid_bn_cache = batchnorm_forward(
            v_fused, v["mid.bn.gamma"], v["mid.bn.beta"],
            params.bn_state["mid.bn.running_mean"], params.bn_state["mid.bn.running_var"],
            eps=config.bn_epsilon, momentum=config.bn_momentum, train=train)
        logits_skip, mid_cls_cache = dense_forward(v_fused_post, v["mid.cls.W"], v["mid.cls.b"])
        bundle.v_mid = v_mid
        bundle.v_fused = v_fused
        bundle.v_fused_post = v_fused_post
        bundle.logits_skip = logits_skip
        mid_caches = (mid_fc_cache, mid_bn_cache, mid_cls_cache)

    cache = (modality, stage_caches, head_fc_cache, head_bn_cache, head_cls_cache, mid_caches)
    return bundle, cache


def zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.values.items()}


def encode_backward(params, config, cache, grads, out=None):
    """Backpropagate BundleGrads through one encode call.

    Accumulates into `out` (a name -> array dict covering every trainable
    parameter) and returns (out, input gradient).
    """
    modality, stage_caches, head_fc_cache, head_bn_cache, head_cls_cache, mid_caches = cache
    if out is None:
        out = zero_grads(params)

    d_v_post, dw, db = dense_backward(head_cls_cache, grads.d_logits_backbone)
    out["head.cls.W"] += dw
    out["head.cls.b"] += db
    d_v_post = d_v_post + grads.d_v_post

    d_tap = None
    d_v_pre_extra = 0.0
    if config.mfi_enabled:
        if mid_caches is None:
            raise ValueError("encode_backward: cache lacks skip-branch entries")
        mid_fc_cache, mid_bn_cache, mid_cls_cache = mid_caches
        d_fused_post, dw, db = dense_backward(mid_cls_cache, grads.d_logits_skip)
        out["mid.cls.W"] += dw
        out["mid.cls.b"] += db
        if grads.d_v_fused_post is not None:
            d_fused_post = d_fused_post + grads.d_v_fused_post
        d_fused, dgamma, dbeta = batchnorm_backward(mid_bn_cache, d_fused_post)
        out["mid.bn.gamma"] += dgamma
        out["mid.bn.beta"] += dbeta
        if config.fusion == "sum":
            d_v_mid = d_fused
            d_v_pre_extra = d_fused
        else:
            d_v_mid = d_fused[:, :config.d]
            d_v_pre_extra = d_fused[:, config.d:]
        d_tap, dw, db = dense_backward(mid_fc_cache, d_v_mid)
        out["mid.fc.W"] += dw
        out["mid.fc.b"] += db

    d_v_pre, dgamma, dbeta = batchnorm_backward(head_bn_cache, d_v_post)
    out["head.bn.gamma"] += dgamma
    out["head.bn.beta"] += dbeta
    d_v_pre = d_v_pre + d_v_pre_extra

    d_h, dw, db = dense_backward(head_fc_cache, d_v_pre)
    out["head.fc.W"] += dw
    out["head.fc.b"] += db

    for i in range(len(config.stage_dims), 0, -1):
        dcache, rcache = stage_caches[i - 1]
        if d_tap is not None and i == config.tap_stage:
            d_h = d_h + d_tap
        dz = relu_backward(rcache, d_h)
        d_h, dw, db = dense_backward(dcache, dz)
        out[f"{modality}.stage{i}.W"] += dw
        out[f"{modality}.stage{i}.b"] += db
    return out, d_h


def test_feature(bundle, config):
    """L2-normalized representation used for ranking and metric learning."""
    sel = bundle.v_fused_post if config.mfi_enabled else bundle.v_post
    normalized, _ = l2_normalize_forward(sel)
    return normalized
