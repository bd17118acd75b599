import csv
import json
import math
from dataclasses import fields

import mpmath
import numpy as np
import pytest

from lccan import core as C
from lccan.backbone import Backbone, classify
from lccan.gradcheck import grad_check
from lccan.lcca import LCCA, AlignConfig
from lccan.synthia import sample_episode
from lccan.training import (InnerConfig, PretrainConfig, TrainConfig, cross_entropy_ls, dice_loss,
                            expand_support, finetune_classifier, load_lcca, meta_step_loss, meta_train,
                            pretrain, save_lcca, support_accuracy)


def t64(a, grad=False):
    return C.tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(inner=InnerConfig(lr=0.0))
    with pytest.raises(ValueError):
        TrainConfig(pretrain=PretrainConfig(label_smoothing=1.0))
    cfg = TrainConfig.from_dict({"inner": {"iters": 7}, "seed": 3})
    assert cfg.inner.iters == 7 and cfg.seed == 3
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_shipped_defaults_match_dataclass():
    from lccan.cli import default_config
    d = default_config()["train"]
    cfg = TrainConfig.from_dict(d)
    assert cfg.pretrain.lr == 2.5e-3 and cfg.pretrain.label_smoothing == 0.1
    assert cfg.inner.iters == 100 and cfg.inner.lr == 0.1 and cfg.outer.lr == 1e-3
    assert cfg.outer.episodes == 500 and cfg.pretrain.epochs == 5 and cfg.ida_in_meta


def test_mirror_flip_is_only_pretrain_augmentation():
    names = {f.name for f in fields(PretrainConfig)}
    assert names - {"epochs", "lr", "momentum", "weight_decay", "label_smoothing", "batch_size"} == {"mirror_flip"}


# ---------------------------------------------------------------- losses

def test_ce_uniform_is_ln2():
    with C.precision(np.float64):
        loss = cross_entropy_ls(np.zeros((2, 64, 64)), np.random.default_rng(0).integers(0, 2, (64, 64)))
    assert abs(loss.item() - math.log(2)) <= 1e-12


def test_ce_confident_limit():
    logits = np.zeros((2, 4, 4))
    logits[1] = 50.0
    with C.precision(np.float64):
        assert cross_entropy_ls(logits, np.ones((4, 4))).item() < 1e-20


def test_ce_smoothed_matches_mpmath():
    mpmath.mp.dps = 40
    lse = mpmath.log(1 + mpmath.e ** 10)
    expected = float(0.05 * (lse - 0) + 0.95 * (lse - 10))
    logits = np.zeros((2, 1, 1))
    logits[1] = 10.0
    with C.precision(np.float64):
        got = cross_entropy_ls(logits, np.ones((1, 1)), 0.1).item()
    assert abs(got - expected) <= 1e-12
    assert abs(expected - 0.5000453989) < 1e-9


def test_ce_batched_is_mean_of_singles():
    rng = np.random.default_rng(1)
    logits, labels = rng.standard_normal((3, 4, 5, 5)), rng.integers(0, 4, (3, 5, 5))
    with C.precision(np.float64):
        whole = cross_entropy_ls(logits, labels, 0.1).item()
        parts = [cross_entropy_ls(logits[i], labels[i], 0.1).item() for i in range(3)]
    assert abs(whole - np.mean(parts)) <= 1e-12


def test_ce_label_range():
    with pytest.raises(ValueError):
        cross_entropy_ls(np.zeros((2, 3, 3)), np.full((3, 3), 2))


@pytest.mark.parametrize("seed", range(3))
def test_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, (4, 4))
    rep = grad_check(lambda x: cross_entropy_ls(x, labels, 0.1), [t64(rng.standard_normal((3, 4, 4)), True)])
    assert rep.passed, rep


def test_dice_closed_forms():
    m = np.zeros((64, 64))
    m[:, :32] = 1
    with C.precision(np.float64):
        assert dice_loss(m, m).item() == 0.0
        assert abs(dice_loss(1 - m, m).item() - (1 - 1 / 4097)) <= 1e-12
        assert abs(dice_loss(np.full((64, 64), 0.5), m).item() - (1 - 2049 / 4097)) <= 1e-12
    with pytest.raises(ValueError):
        dice_loss(np.zeros((4, 4)), np.zeros((4, 5)))


@pytest.mark.parametrize("seed", range(3))
def test_dice_gradient(seed):
    rng = np.random.default_rng(seed)
    mask = (rng.random((6, 6)) < 0.4).astype(float)
    rep = grad_check(lambda p: dice_loss(p, mask), [t64(rng.random((6, 6)), True)])
    assert rep.passed, rep


# ---------------------------------------------------------------- stage 1

def test_pretrain_zero_epochs_is_init(reference_models, tmp_path):
    manifest, _, _ = reference_models
    cfg = TrainConfig.from_dict({"pretrain": {"epochs": 0}, "seed": 5})
    net, _, losses = pretrain(manifest, 0, cfg, out_dir=tmp_path)
    assert losses == []
    assert net.checksum() == Backbone.init(5).checksum()
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["frozen"] == ["enc", "dec"] and meta["base_classes"] == [c for c in range(12) if c % 4]


def test_pretrain_bad_fold(reference_models):
    with pytest.raises(ValueError):
        pretrain(reference_models[0], 4, TrainConfig.from_dict({"pretrain": {"epochs": 0}}))


def test_reference_pretrain_loss_falls(reference_run):
    with (reference_run.backbone / "losses.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    assert float(rows[-1]["loss"]) < float(rows[0]["loss"])


def test_backbone_frozen_after_pretrain(reference_models):
    _, net, _ = reference_models
    assert not any(p.requires_grad for p in net.params.values())


# ---------------------------------------------------------------- inner loop

def test_finetune_zero_iters_uniform(reference_models):
    manifest, net, _ = reference_models
    ep = sample_episode(manifest, 0, 1, "eval", 0)
    theta = finetune_classifier(ep.support, net, InnerConfig(iters=0))
    z = net.features(ep.query.image)[1]
    assert np.all(classify(z, theta).data == 0)


def test_finetune_empty_support(reference_models):
    with pytest.raises(ValueError):
        finetune_classifier([], reference_models[1])


def test_finetune_reference_accuracy_and_freeze(reference_models):
    manifest, net, _ = reference_models
    before = net.checksum()
    ep = sample_episode(manifest, 0, 1, "eval", 0, index=0)
    theta = finetune_classifier(ep.support, net, InnerConfig(), use_ida=True)
    acc = support_accuracy(theta, net, expand_support(ep.support, True))
    assert acc > 0.9, acc
    assert net.checksum() == before


def test_finetune_feature_cache_equivalent(reference_models):
    manifest, net, _ = reference_models
    ep = sample_episode(manifest, 0, 2, "train", 0, index=3)
    a = finetune_classifier(ep.support, net, use_ida=False)
    feats = [net.features(s.image)[1].data for s in ep.support]
    b = finetune_classifier(ep.support, net, use_ida=False, features=feats)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


# ---------------------------------------------------------------- stage 2

def test_meta_train_zero_episodes_is_init(reference_models):
    manifest, net, _ = reference_models
    cfg = TrainConfig.from_dict({"outer": {"episodes": 0}, "seed": 2})
    model, losses = meta_train(manifest, 0, net, cfg)
    assert losses == [] and model.checksum() == LCCA.init(AlignConfig(), 2).checksum()


def test_meta_train_deterministic_and_frozen(reference_models):
    manifest, net, _ = reference_models
    before = net.checksum()
    cfg = TrainConfig.from_dict({"outer": {"episodes": 3}})
    a, la = meta_train(manifest, 0, net, cfg)
    b, lb = meta_train(manifest, 0, net, cfg)
    assert a.checksum() == b.checksum() and la == lb
    assert a.checksum() != LCCA.init(AlignConfig(), 0).checksum()
    assert net.checksum() == before


def test_meta_gradient_reaches_only_omega(reference_models):
    manifest, net, _ = reference_models
    model = LCCA.init()
    ep = sample_episode(manifest, 0, 1, "train", 0)
    theta = finetune_classifier(ep.support, net)
    theta_sum = {k: v.data.tobytes() for k, v in theta.items()}
    meta_step_loss(model, net, theta, ep.support, ep.query).backward()
    assert all(p.grad is not None for p in model.params.values())
    assert all(v.grad is None and not v.requires_grad for v in theta.values())
    assert all(p.grad is None for p in net.params.values())
    assert {k: v.data.tobytes() for k, v in theta.items()} == theta_sum


def test_reference_meta_dice_decreases(reference_run):
    with (reference_run.lcca / "losses.csv").open() as fh:
        losses = [float(r["dice_loss"]) for r in csv.DictReader(fh)]
    assert len(losses) == 500
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_lcca_checkpoint_roundtrip(tmp_path):
    model = LCCA.init(AlignConfig(layers=(3, 5), use_lsa=False, tau=4.0), seed=9)
    save_lcca(tmp_path, model, {"fold": 1})
    back = load_lcca(tmp_path)
    assert back.cfg == model.cfg and back.checksum() == model.checksum()
