"""Training loop, checkpoints, ablation runner, and gradient verification."""

import hashlib
import json
import time
import warnings
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from .data import (
    Dataset,
    SynthConfig,
    batches_per_epoch,
    generate_synthetic,
    sample_pk_batch,
    split_identity_disjoint,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    encode,
    encode_backward,
    init_encoder,
    zero_grads,
)
from .evaluation import EvalProtocol, run_protocol
from .losses import BundleGrads, LabeledBatch, LossConfig, total_loss
from .numerics import (
    AdamState,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    dense_backward,
    dense_forward,
    finite_diff_grad,
    l2_normalize_backward,
    l2_normalize_forward,
    max_relative_error,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)

CHECKPOINT_HEADER = "xmodal-checkpoint v1"
ABLATION_ARMS = ("baseline", "DMTL", "MFI", "EDFL")


class ConfigError(Exception):
    """Bad or inconsistent configuration input."""


@dataclass
class TrainConfig:
    encoder: EncoderConfig
    loss: LossConfig = field(default_factory=LossConfig)
    P: int = 8
    K: int = 4
    epochs: int = 30
    freeze_stage_epochs: int = 5
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 15
    seed: int = 0

    def __post_init__(self):
        # the encoder flags are authoritative for branch selection
        self.loss.mfi_enabled = self.encoder.mfi_enabled
        self.loss.backbone_loss_enabled = self.encoder.backbone_loss_enabled

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("TrainConfig: epochs must be >= 1")
        if self.learning_rate < 0.0:
            raise ConfigError("TrainConfig: learning_rate must be >= 0")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError("TrainConfig: lr_decay_factor must lie in (0, 1]")
        if self.freeze_stage_epochs >= self.epochs:
            raise ConfigError("TrainConfig: freeze_stage_epochs must be < epochs")
        if self.P < 2 or self.K < 1:
            raise ConfigError("TrainConfig: need P >= 2 and K >= 1")
        self.loss.validate()

    def to_dict(self):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__
             if f not in ("encoder", "loss")}
        d["encoder"] = self.encoder.to_dict()
        d["loss"] = {f: getattr(self.loss, f) for f in self.loss.__dataclass_fields__}
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"TrainConfig: unknown keys {sorted(unknown)}")
        d = dict(d)
        if "encoder" not in d:
            raise ConfigError("TrainConfig: missing 'encoder' section")
        try:
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        loss_d = d.pop("loss", {})
        unknown = set(loss_d) - set(LossConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"LossConfig: unknown keys {sorted(unknown)}")
        d["loss"] = LossConfig(**loss_d)
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class RunReport:
    config_echo: dict
    seed: int
    epoch_records: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing=False):
        d = {
            "config": self.config_echo,
            "seed": self.seed,
            "epochs": self.epoch_records,
            "metrics": self.metrics,
        }
        # timing is excluded by default so that reports for identical
        # (data, config, seed) inputs are byte-identical
        if include_timing:
            d["wall_clock_seconds"] = self.wall_clock_seconds
        return d

    def to_json(self, include_timing=False):
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        lines = []
        if self.epoch_records:
            cols = ["epoch", "lr", "L_softmax", "L_backbone", "L_c_tri", "L_i_tri", "L_d_tri", "L_all"]
            lines.append("  ".join(f"{c:>10}" for c in cols))
            for rec in self.epoch_records:
                row = [f"{rec['epoch']:>10d}", f"{rec['lr']:>10.2e}"]
                row += [f"{rec[c]:>10.4f}" for c in cols[2:]]
                lines.append("  ".join(row))
        for name, m in sorted(self.metrics.items()):
            cmc = "  ".join(f"r={r}: {v:.4f}" for r, v in sorted(m["cmc"].items(), key=lambda kv: int(kv[0])))
            lines.append(f"{name}:  {cmc}  mAP: {m['map']:.4f}")
        lines.append(f"seed: {self.seed}  wall-clock: {self.wall_clock_seconds:.2f}s")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _split_batch(batch, label_map):
    """Per-modality feature matrices and mapped class labels, visible first."""
    vis = np.flatnonzero(batch.modality == L.VISIBLE)
    thm = np.flatnonzero(batch.modality == L.THERMAL)
    xv, xt = batch.features[vis], batch.features[thm]
    yv = np.array([label_map[i] for i in batch.identity[vis]])
    yt = np.array([label_map[i] for i in batch.identity[thm]])
    return xv, xt, yv, yt


def train(dataset, config):
    """Single-threaded deterministic training run."""
    config.validate()
    idents = dataset.identities()
    enc_cfg = config.encoder
    if enc_cfg.num_classes < 2:
        enc_cfg = replace(enc_cfg, num_classes=len(idents))
    if enc_cfg.num_classes != len(idents):
        raise ConfigError(
            f"num_classes {enc_cfg.num_classes} does not match {len(idents)} training identities")
    if enc_cfg.input_dim != dataset.input_dim:
        raise ConfigError(
            f"input_dim {enc_cfg.input_dim} does not match dataset dim {dataset.input_dim}")
    enc_cfg.validate()
    label_map = {ident: i for i, ident in enumerate(idents)}

    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    params = init_encoder(enc_cfg, config.seed)
    init_values = {k: v.copy() for k, v in params.values.items()}
    state = AdamState(params.values, learning_rate=config.learning_rate)
    n_batches = batches_per_epoch(dataset, config.P, config.K)

    report = RunReport(config_echo=_config_echo(config, enc_cfg), seed=config.seed)
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate
        if epoch > config.lr_decay_epoch:
            lr *= config.lr_decay_factor
        state.learning_rate = lr
        frozen = epoch <= config.freeze_stage_epochs
        sums = None
        for _ in range(n_batches):
            batch = sample_pk_batch(dataset, config.P, config.K, rng)
            xv, xt, yv, yt = _split_batch(batch, label_map)
            bundle_v, cache_v = encode(params, enc_cfg, xv, "visible", mode="train")
            bundle_t, cache_t = encode(params, enc_cfg, xt, "thermal", mode="train")
            breakdown, gv, gt = total_loss(bundle_v, bundle_t, yv, yt,
                                           config.loss, config.P, config.K)
            grads = zero_grads(params)
            encode_backward(params, enc_cfg, cache_v, gv, out=grads)
            encode_backward(params, enc_cfg, cache_t, gt, out=grads)
            if frozen:
                for name in grads:
                    if name.startswith(("visible.", "thermal.")):
                        grads[name][...] = 0.0
            adam_step(params.values, grads, state)
            comp = breakdown.as_dict()
            if sums is None:
                sums = dict(comp)
            else:
                for k, v in comp.items():
                    sums[k] += v
        rec = {"epoch": epoch, "lr": lr, "L_backbone": 0.0}
        rec.update({k: v / n_batches for k, v in sums.items()})
        report.epoch_records.append(rec)
        if frozen:
            for name, v in params.values.items():
                if name.startswith(("visible.", "thermal.")):
                    assert np.array_equal(v, init_values[name]), f"frozen stage {name} moved"
    report.wall_clock_seconds = time.perf_counter() - start
    return params, enc_cfg, report


def _config_echo(config, enc_cfg):
    echo = config.to_dict()
    echo["encoder"] = enc_cfg.to_dict()
    return echo


def evaluate(params, enc_cfg, test_dataset, protocol):
    """Metrics fragment for one query direction."""
    result = run_protocol(test_dataset, params, enc_cfg, protocol)
    return {
        "protocol": result.protocol,
        "cmc": {str(r): v for r, v in sorted(result.cmc.items())},
        "map": result.map_score,
        "trials": result.trials,
        "seed": result.seed,
        "skipped_queries": result.skipped_queries,
    }


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params, enc_cfg, path):
    doc = {
        "encoder_config": enc_cfg.to_dict(),
        "params": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                   for k, v in params.values.items()},
        "bn_state": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                     for k, v in params.bn_state.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != CHECKPOINT_HEADER:
                raise ConfigError(f"{path}: expected header {CHECKPOINT_HEADER!r}, got {header!r}")
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    enc_cfg = EncoderConfig.from_dict(doc["encoder_config"])

    def unpack(section):
        return {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
                for k, v in section.items()}

    params = EncoderParams(values=unpack(doc["params"]), bn_state=unpack(doc["bn_state"]))
    expected = set(init_encoder(enc_cfg, 0).values)
    if set(params.values) != expected:
        raise ConfigError(f"{path}: parameter names do not match the stored encoder config")
    return params, enc_cfg


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def arm_config(base, arm):
    """The four ablation arms differ only in the branch/loss flags."""
    if arm == "baseline":
        enc = replace(base.encoder, mfi_enabled=False)
        loss = replace(base.loss, lambda2=0.0)
    elif arm == "DMTL":
        enc = replace(base.encoder, mfi_enabled=False)
        loss = replace(base.loss)
    elif arm == "MFI":
        enc = replace(base.encoder, mfi_enabled=True)
        loss = replace(base.loss, lambda2=0.0)
    elif arm == "EDFL":
        enc = replace(base.encoder, mfi_enabled=True)
        loss = replace(base.loss)
    else:
        raise ConfigError(f"unknown ablation arm {arm!r}")
    cfg = replace(base, encoder=enc, loss=loss)
    cfg.__post_init__()
    return cfg


def split_hash(dataset):
    payload = ",".join(str(i) for i in dataset.identities())
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def run_ablation(synth_cfg, base_config, seeds, train_fraction=0.5, ranks=(1, 10, 20)):
    """Train all four arms per seed on identical data/splits; report rank-1 and mAP."""
    if not seeds:
        raise ConfigError("run_ablation: need at least one seed")
    arms = {arm: {"rank1": [], "map": []} for arm in ABLATION_ARMS}
    per_seed = []
    for seed in seeds:
        scfg = replace(synth_cfg, seed=seed)
        dataset = generate_synthetic(scfg)
        train_ds, test_ds = split_identity_disjoint(dataset, train_fraction, seed)
        seed_rec = {"seed": seed, "split_hash": split_hash(train_ds), "arms": {}}
        for arm in ABLATION_ARMS:
            cfg = replace(arm_config(base_config, arm), seed=seed)
            params, enc_cfg, _ = train(train_ds, cfg)
            protocol = EvalProtocol(query_modality=L.VISIBLE, gallery_modality=L.THERMAL,
                                    trials=1, single_shot=False, ranks_reported=ranks, seed=seed)
            metrics = evaluate(params, enc_cfg, test_ds, protocol)
            rank1 = metrics["cmc"]["1"]
            arms[arm]["rank1"].append(rank1)
            arms[arm]["map"].append(metrics["map"])
            seed_rec["arms"][arm] = {"rank1": rank1, "map": metrics["map"]}
        per_seed.append(seed_rec)
    table = {
        "arms": {arm: {
            "mean_rank1": float(np.mean(v["rank1"])),
            "mean_map": float(np.mean(v["map"])),
            "per_seed_rank1": v["rank1"],
            "per_seed_map": v["map"],
        } for arm, v in arms.items()},
        "seeds": list(seeds),
        "per_seed": per_seed,
    }
    return table


def ablation_text(table):
    lines = [f"{'arm':>10}  {'mean rank-1':>12}  {'mean mAP':>10}"]
    for arm in ABLATION_ARMS:
        rec = table["arms"][arm]
        lines.append(f"{arm:>10}  {rec['mean_rank1']:>12.4f}  {rec['mean_map']:>10.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def _check_dense(rng):
    n, din, dout = int(rng.integers(2, 8)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
    x = rng.standard_normal((n, din))
    w = rng.standard_normal((din, dout))
    b = rng.standard_normal(dout)
    proj = rng.standard_normal((n, dout))

    y, cache = dense_forward(x, w, b)
    dx, dw, db = dense_backward(cache, proj)
    errs = [
        max_relative_error(dx, finite_diff_grad(lambda v: float((dense_forward(v, w, b)[0] * proj).sum()), x)),
        max_relative_error(dw, finite_diff_grad(lambda v: float((dense_forward(x, v, b)[0] * proj).sum()), w)),
        max_relative_error(db, finite_diff_grad(lambda v: float((dense_forward(x, w, v)[0] * proj).sum()), b)),
    ]
    return max(errs)


def _check_relu(rng):
    x = rng.standard_normal((int(rng.integers(1, 8)), int(rng.integers(1, 8))))
    x = x + np.sign(x) * 0.05  # keep away from the kink at 0
    proj = rng.standard_normal(x.shape)
    _, cache = relu_forward(x)
    dx = relu_backward(cache, proj)
    fd = finite_diff_grad(lambda v: float((relu_forward(v)[0] * proj).sum()), x)
    return max_relative_error(dx, fd)


def _check_batchnorm(rng):
    n, d = int(rng.integers(2, 8)), int(rng.integers(1, 8))
    x = rng.standard_normal((n, d))
    gamma = 0.5 + rng.random(d)
    beta = rng.standard_normal(d)
    proj = rng.standard_normal((n, d))

    def run(xx, gg, bb):
        rm, rv = np.zeros(d), np.ones(d)
        return batchnorm_forward(xx, gg, bb, rm, rv, train=True)

    _, cache = run(x, gamma, beta)
    dx, dgamma, dbeta = batchnorm_backward(cache, proj)
    errs = [
        max_relative_error(dx, finite_diff_grad(lambda v: float((run(v, gamma, beta)[0] * proj).sum()), x)),
        max_relative_error(dgamma, finite_diff_grad(lambda v: float((run(x, v, beta)[0] * proj).sum()), gamma)),
        max_relative_error(dbeta, finite_diff_grad(lambda v: float((run(x, gamma, v)[0] * proj).sum()), beta)),
    ]
    return max(errs)


def _check_l2_normalize(rng):
    x = rng.standard_normal((int(rng.integers(1, 8)), int(rng.integers(2, 8))))
    x += np.sign(x) * 0.1
    proj = rng.standard_normal(x.shape)
    _, cache = l2_normalize_forward(x)
    dx = l2_normalize_backward(cache, proj)
    fd = finite_diff_grad(lambda v: float((l2_normalize_forward(v)[0] * proj).sum()), x)
    return max_relative_error(dx, fd)


def _check_softmax(rng):
    n, c = int(rng.integers(1, 8)), int(rng.integers(2, 8))
    logits = rng.standard_normal((n, c))
    labels = rng.integers(0, c, size=n)
    _, grad = softmax_cross_entropy(logits, labels)
    fd = finite_diff_grad(lambda v: softmax_cross_entropy(v, labels)[0], logits)
    return max_relative_error(grad, fd)


def _stable_pk_features(rng, P, K, dim, rho, *, tol=1e-3, max_tries=50):
    """Random PK metric batch whose hinge terms and mining selections sit
    safely away from kinks, so finite differences are trustworthy."""
    for _ in range(max_tries):
        feats = rng.standard_normal((2 * P * K, dim))
        idents = np.repeat(np.arange(P), 2 * K)
        mods = np.array(([L.VISIBLE] * K + [L.THERMAL] * K) * P)
        batch = LabeledBatch(features=feats, identity=idents, modality=mods, P=P, K=K)
        if L.mining_margins(batch, rho) > tol:
            return batch
    raise RuntimeError("could not build a kink-free triplet batch")


def _check_triplet(rng, kind):
    P, K = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    dim = int(rng.integers(2, 6))
    rho = 0.5
    batch = _stable_pk_features(rng, P, K, dim, rho)

    def loss_of(feats):
        b = LabeledBatch(features=feats, identity=batch.identity,
                         modality=batch.modality, P=P, K=K)
        if kind == "batch_hard":
            return L.batch_hard_triplet(feats, batch.identity, rho)
        if kind == "cross":
            return L.cross_modality_triplet(b, rho)
        return L.intra_modality_triplet(b, rho)

    loss, grad = loss_of(batch.features)
    fd = finite_diff_grad(lambda v: loss_of(v)[0], batch.features)
    return max_relative_error(grad, fd)


def _full_model_setup(rng, mfi, fusion="cat"):
    cfg = EncoderConfig(input_dim=5, num_classes=3, stage_dims=(6, 5), tap_stage=2,
                        d=4, fusion=fusion, mfi_enabled=mfi, backbone_loss_enabled=True)
    params = init_encoder(cfg, int(rng.integers(0, 2 ** 31)))
    for k in params.values:
        params.values[k] = params.values[k] + 0.05 * rng.standard_normal(params.values[k].shape)
    P, K = 3, 2
    x = rng.standard_normal((2 * P * K, cfg.input_dim))
    # visible rows first, then thermal rows, K rows per identity in each half
    labels = np.concatenate([np.repeat(np.arange(P), K)] * 2)
    loss_cfg = LossConfig(rho=0.5, lambda1=0.1, lambda2=2.0,
                          mfi_enabled=mfi, backbone_loss_enabled=True)
    return cfg, params, loss_cfg, x, labels, P, K


def _model_forward(params, cfg, loss_cfg, x, labels, P, K):
    n = x.shape[0] // 2
    work = params.copy()  # keep running stats out of the finite-difference loop
    bundle_v, cache_v = encode(work, cfg, x[:n], "visible", mode="train")
    bundle_t, cache_t = encode(work, cfg, x[n:], "thermal", mode="train")
    breakdown, gv, gt = total_loss(bundle_v, bundle_t, labels[:n], labels[n:], loss_cfg, P, K)
    grads = zero_grads(params)
    encode_backward(work, cfg, cache_v, gv, out=grads)
    encode_backward(work, cfg, cache_t, gt, out=grads)
    return breakdown.total, grads


def _metric_margins(params, cfg, loss_cfg, x, labels, P, K):
    n = x.shape[0] // 2
    work = params.copy()
    bundle_v, _ = encode(work, cfg, x[:n], "visible", mode="train")
    bundle_t, _ = encode(work, cfg, x[n:], "thermal", mode="train")
    sel_v = bundle_v.v_fused_post if cfg.mfi_enabled else bundle_v.v_post
    sel_t = bundle_t.v_fused_post if cfg.mfi_enabled else bundle_t.v_post
    feats, _ = l2_normalize_forward(np.concatenate([sel_v, sel_t]))
    mods = np.array([L.VISIBLE] * n + [L.THERMAL] * n)
    batch = LabeledBatch(features=feats, identity=np.concatenate([labels[:n], labels[n:]]),
                         modality=mods, P=P, K=K)
    return L.mining_margins(batch, loss_cfg.rho)


def _check_full_model(rng, mfi):
    # resample until the mined triplets are safely away from hinge kinks
    for _ in range(50):
        cfg, params, loss_cfg, x, labels, P, K = _full_model_setup(rng, mfi)
        if _metric_margins(params, cfg, loss_cfg, x, labels, P, K) > 1e-3:
            break
    else:
        raise RuntimeError("could not build a kink-free model instance")

    _, grads = _model_forward(params, cfg, loss_cfg, x, labels, P, K)
    worst = 0.0
    for name in sorted(params.values):
        def f(v, name=name):
            trial = params.copy()
            trial.values[name] = v
            return _model_forward(trial, cfg, loss_cfg, x, labels, P, K)[0]

        fd = finite_diff_grad(f, params.values[name].copy())
        worst = max(worst, max_relative_error(grads[name], fd))
    return worst


GRADCHECK_COMPONENTS = {
    "dense": _check_dense,
    "relu": _check_relu,
    "batchnorm": _check_batchnorm,
    "l2_normalize": _check_l2_normalize,
    "softmax_cross_entropy": _check_softmax,
    "batch_hard_triplet": lambda rng: _check_triplet(rng, "batch_hard"),
    "cross_modality_triplet": lambda rng: _check_triplet(rng, "cross"),
    "intra_modality_triplet": lambda rng: _check_triplet(rng, "intra"),
    "full_model_mfi": lambda rng: _check_full_model(rng, True),
    "full_model_backbone": lambda rng: _check_full_model(rng, False),
}

# the full-model sweep touches every parameter, so fewer repeats suffice
FULL_MODEL_TRIALS = 5


def gradcheck(trials=100, seed=0, threshold=1e-4):
    """Finite-difference verification of every backward path.

    Returns (report, all_ok); report maps component name to its max relative
    error and trial count.
    """
    report = {}
    all_ok = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for name, check in GRADCHECK_COMPONENTS.items():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            n = FULL_MODEL_TRIALS if name.startswith("full_model") else trials
            worst = 0.0
            for _ in range(n):
                worst = max(worst, check(rng))
            ok = worst < threshold
            all_ok &= ok
            report[name] = {"max_relative_error": worst, "trials": n, "ok": ok}
    return report, all_ok


def gradcheck_text(report):
    lines = [f"{'component':>24}  {'max rel err':>12}  {'trials':>6}  status"]
    for name, rec in report.items():
        status = "ok" if rec["ok"] else "FAIL"
        lines.append(f"{name:>24}  {rec['max_relative_error']:>12.3e}  {rec['trials']:>6d}  {status}")
    return "\n".join(lines) + "\n"


def parse_synth_config(d):
    known = set(SynthConfig.__dataclass_fields__)
    unknown = set(d) - known - {"train_fraction"}
    if unknown:
        raise ConfigError(f"SynthConfig: unknown keys {sorted(unknown)}")
    d = dict(d)
    train_fraction = d.pop("train_fraction", 0.5)
    for key in ("modality_transform", "modality_offset"):
        if d.get(key) is not None:
            d[key] = np.asarray(d[key], dtype=np.float64)
    cfg = SynthConfig(**d)
    cfg.validate()
    return cfg, train_fraction
