"""Losses, backbone pretraining, classifier fine-tuning and LCCA meta-training."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import core as C
from . import rng as rng_mod
from . import tenfile
from .backbone import IMAGE_SIZE, Backbone, classify, init_classifier, init_head
from .ida import IdaConfig, augment_support
from .lcca import LCCA, AlignConfig
from .optim import ParamGroup, cosine_lr, sgd_step
from .synthia import DatasetManifest, Sample, episode_classes, sample_episode

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 5
    lr: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    batch_size: int = 4
    mirror_flip: bool = True


@dataclass
class InnerConfig:
    iters: int = 100
    lr: float = 1e-1
    momentum: float = 0.0
    weight_decay: float = 0.0


@dataclass
class OuterConfig:
    episodes: int = 500
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    shots: int = 1


@dataclass
class TrainConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    inner: InnerConfig = field(default_factory=InnerConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    ida_in_meta: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.pretrain.lr, self.inner.lr, self.outer.lr) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.pretrain.label_smoothing < 1:
            raise ValueError("label smoothing must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        return cls(pretrain=PretrainConfig(**d.pop("pretrain", {})),
                   inner=InnerConfig(**d.pop("inner", {})),
                   outer=OuterConfig(**d.pop("outer", {})), **d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- losses

def cross_entropy_ls(logits, labels, epsilon: float = 0.0) -> C.Tensor:
    """Pixel-mean cross entropy against ``(1-eps)*onehot + eps/C`` targets.

    ``logits`` is ``[C,H,W]`` or ``[N,C,H,W]``; ``labels`` holds class indices.
    """
    logits = C.as_tensor(logits)
    labels = np.asarray(labels).astype(np.int64)
    axis = logits.ndim - 3
    n_cls = logits.shape[axis]
    if labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError("label out of range")
    onehot = np.moveaxis(np.eye(n_cls, dtype=logits.dtype)[labels], -1, axis)
    target = (1 - epsilon) * onehot + epsilon / n_cls
    logp = C.log_softmax(logits, axis=axis)
    per_pixel = C.sum(C.mul(logp, target), axis=axis)
    return C.neg(C.mean(per_pixel))


def dice_loss(probs, mask, smooth: float = 1.0) -> C.Tensor:
    """``1 - (2*sum(p*m) + s) / (sum(p) + sum(m) + s)``."""
    probs = C.as_tensor(probs)
    mask = np.asarray(mask, dtype=probs.dtype)
    if probs.shape != mask.shape:
        raise ValueError("probability map and mask differ in shape")
    inter = C.sum(C.mul(probs, mask))
    num = C.add(C.scale(inter, 2.0), smooth)
    den = C.add(C.sum(probs), float(mask.sum()) + smooth)
    return C.sub(1.0, C.div(num, den))


def foreground_probability(logits: C.Tensor) -> C.Tensor:
    return C.index(C.softmax(logits, axis=-3), (Ellipsis, 1, slice(None), slice(None)))


# ---------------------------------------------------------------- stage 1

def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def pretrain(manifest: DatasetManifest, fold: int, cfg: TrainConfig = TrainConfig(), out_dir=None):
    """Supervised pixel classification over the fold's base classes.

    Returns ``(backbone, head, epoch_losses)``; the backbone comes back frozen.
    """
    pc = cfg.pretrain
    base = episode_classes(manifest, fold, "train")
    label_of = {c: i + 1 for i, c in enumerate(base)}
    pool = [s for s in manifest.samples if s.class_id in label_of]
    if not pool:
        raise ValueError(f"no base-class samples for fold {fold}")
    net = Backbone.init(cfg.seed)
    head = init_head(len(base) + 1, cfg.seed, name="pretrain_head")
    group = ParamGroup({**net.params, **{f"head/{k}": v for k, v in head.items()}},
                       lr=pc.lr, momentum=pc.momentum, weight_decay=pc.weight_decay)
    steps_per_epoch = (len(pool) + pc.batch_size - 1) // pc.batch_size
    total = pc.epochs * steps_per_epoch
    losses, step = [], 0
    for epoch in range(pc.epochs):
        rng = rng_mod.stream(cfg.seed, "pretrain", fold, epoch)
        order = rng.permutation(len(pool))
        flips = rng.random(len(pool)) < 0.5
        running = []
        for b in range(steps_per_epoch):
            idx = order[b * pc.batch_size:(b + 1) * pc.batch_size]
            imgs = np.stack([pool[i].image for i in idx])
            labels = np.stack([pool[i].mask * label_of[pool[i].class_id] for i in idx])
            if pc.mirror_flip:
                f = flips[idx]
                imgs[f] = imgs[f][..., ::-1]
                labels[f] = labels[f][..., ::-1]
            group.lr = cosine_lr(pc.lr, step, total)
            group.zero_grad()
            _, z = net.features(imgs)
            logits = classify(z, head)
            loss = cross_entropy_ls(logits, labels, pc.label_smoothing)
            loss.backward()
            sgd_step(group)
            running.append(loss.item())
            step += 1
        losses.append(float(np.mean(running)))
        log.info("pretrain fold %d epoch %d loss %.4f", fold, epoch, losses[-1])
    net.freeze()
    for p in head.values():
        p.requires_grad = False
    if out_dir is not None:
        save_backbone(out_dir, net, head, {"fold": fold, "seed": cfg.seed, "config": cfg.to_dict(),
                                           "base_classes": base})
        _write_csv(Path(out_dir) / "losses.csv", ["epoch", "loss"],
                   [(e, f"{l:.6f}") for e, l in enumerate(losses)])
    return net, head, losses


def save_backbone(out_dir, net: Backbone, head: dict | None, meta: dict) -> None:
    params = {k: v.data for k, v in net.params.items()}
    if head:
        params.update({f"head/{k}": v.data for k, v in head.items()})
    tenfile.save_checkpoint(out_dir, params, {**meta, "frozen": ["enc", "dec"]})


def load_backbone(path) -> tuple[Backbone, dict]:
    params, meta = tenfile.load_checkpoint(path)
    net = Backbone({k: C.tensor(v, dtype=v.dtype) for k, v in params.items() if k.startswith(("enc/", "dec/"))})
    return net.freeze(), meta


# ---------------------------------------------------------------- inner loop

def expand_support(support: list[Sample], use_ida: bool, ida_cfg: IdaConfig = IdaConfig()) -> list[Sample]:
    if not use_ida:
        return list(support)
    out = []
    for s in support:
        out.extend(augment_support(s, ida_cfg))
    return out


def finetune_classifier(support: list[Sample], backbone: Backbone, inner: InnerConfig = InnerConfig(),
                        use_ida: bool = True, ida_cfg: IdaConfig = IdaConfig(),
                        features: list | None = None) -> dict[str, C.Tensor]:
    """Train a fresh zero-initialised 2-way classifier on the (augmented) support set.

    ``features`` may carry precomputed ``z`` maps for ``support`` when IDA is off.
    """
    if not support:
        raise ValueError("empty support set")
    samples = expand_support(support, use_ida, ida_cfg)
    if features is None or use_ida:
        with C.no_grad():
            features = [backbone.features(s.image)[1].data for s in samples]
    # the loop is cheap, so it runs in float64; duplicated support pixels then
    # give the same classifier as a single copy up to f64 roundoff
    z = np.stack(features).astype(np.float64)                      # n,32,8,8
    # 1x1 conv commutes with the bilinear upsample, so upsample once up front
    up = C.bilinear_resize2d(C.tensor(z, dtype=np.float64), IMAGE_SIZE, IMAGE_SIZE).data
    n, c = up.shape[:2]
    flat = C.tensor(up.transpose(1, 0, 2, 3).reshape(c, -1), dtype=np.float64)   # c, n*H*W
    labels = np.stack([s.mask for s in samples]).reshape(-1)
    theta = init_classifier()
    w2 = C.tensor(theta["w"].data.reshape(2, c), requires_grad=True, dtype=np.float64)
    b = C.tensor(theta["b"].data, requires_grad=True, dtype=np.float64)
    group = ParamGroup({"w": w2, "b": b}, lr=inner.lr, momentum=inner.momentum,
                       weight_decay=inner.weight_decay)
    onehot = np.eye(2, dtype=w2.dtype)[labels.astype(np.int64)].T
    for _ in range(inner.iters):
        group.zero_grad()
        logits = C.add(C.matmul(w2, flat), C.reshape(b, (2, 1)))
        loss = C.neg(C.mean(C.sum(C.mul(C.log_softmax(logits, axis=0), onehot), axis=0)))
        loss.backward()
        sgd_step(group)
    return {"w": C.tensor(w2.data.reshape(2, c, 1, 1)), "b": C.tensor(b.data)}


def support_accuracy(theta, backbone: Backbone, samples: list[Sample]) -> float:
    correct = total = 0
    with C.no_grad():
        for s in samples:
            logits = classify(backbone.features(s.image)[1], theta).data
            pred = logits[1] > logits[0]
            correct += int((pred == (s.mask > 0.5)).sum())
            total += s.mask.size
    return correct / total


# ---------------------------------------------------------------- stage 2

def meta_step_loss(model: LCCA, backbone: Backbone, theta, support: list[Sample], query: Sample) -> C.Tensor:
    """Dice loss of the classifier applied to the attention feature of the query."""
    with C.no_grad():
        pyr_q = backbone.encode(query.image)
        sup = [backbone.features(s.image) for s in support]
    atts = [model.attend(pyr_q, pyr, z) for pyr, z in sup]
    z_att = atts[0] if len(atts) == 1 else C.scale(C.sum(C.stack(atts), axis=0), 1.0 / len(atts))
    probs = foreground_probability(classify(z_att, theta))
    return dice_loss(probs, query.mask)


def meta_train(manifest: DatasetManifest, fold: int, backbone: Backbone, cfg: TrainConfig = TrainConfig(),
               align_cfg: AlignConfig = AlignConfig(), ida_cfg: IdaConfig = IdaConfig(), out_dir=None):
    """First-order episodic training of the LCCA parameters; returns ``(model, losses)``."""
    model = LCCA.init(align_cfg, cfg.seed)
    oc = cfg.outer
    group = ParamGroup(model.params, lr=oc.lr, momentum=oc.momentum, weight_decay=oc.weight_decay)
    rows, losses = [], []
    for i in range(oc.episodes):
        ep = sample_episode(manifest, fold, oc.shots, "train", cfg.seed, index=i)
        theta = finetune_classifier(ep.support, backbone, cfg.inner, cfg.ida_in_meta, ida_cfg)
        group.zero_grad()
        loss = meta_step_loss(model, backbone, theta, ep.support, ep.query)
        loss.backward()
        sgd_step(group)
        losses.append(loss.item())
        rows.append((i, ep.class_id, f"{losses[-1]:.6f}"))
        if (i + 1) % 50 == 0:
            log.info("meta fold %d episode %d mean dice(last 50) %.4f", fold, i + 1, np.mean(losses[-50:]))
    if out_dir is not None:
        save_lcca(out_dir, model, {"fold": fold, "seed": cfg.seed, "config": cfg.to_dict()})
        _write_csv(Path(out_dir) / "losses.csv", ["episode", "class_id", "dice_loss"], rows)
    return model, losses


def save_lcca(out_dir, model: LCCA, meta: dict) -> None:
    a = model.cfg
    tenfile.save_checkpoint(out_dir, {k: v.data for k, v in model.params.items()},
                            {**meta, "align": {"tau": a.tau, "gamma": a.gamma, "layers": list(a.layers),
                                               "use_lsa": a.use_lsa, "k": a.k}})


def load_lcca(path) -> LCCA:
    params, meta = tenfile.load_checkpoint(path)
    a = meta["align"]
    cfg = AlignConfig(tau=a["tau"], gamma=a["gamma"], layers=tuple(a["layers"]), use_lsa=a["use_lsa"], k=a["k"])
    return LCCA({k: C.tensor(v, requires_grad=True, dtype=v.dtype) for k, v in params.items()}, cfg)
