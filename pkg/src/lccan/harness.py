"""Episodic inference, mIoU evaluation, ablation suites and report emission."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import core as C
from . import rng as rng_mod
from .backbone import Backbone, classify, predict_mask
from .ida import IdaConfig, augment_support, resize_bilinear, resize_nearest
from .lcca import LCCA, blend
from .synthia import DatasetManifest, Episode, Sample, episode_classes, fold_of, sample_episode
from .training import InnerConfig, TrainConfig, finetune_classifier, meta_train

log = logging.getLogger(__name__)

BASELINE, ORG, AUG, BOTH = "Baseline", "LCCAN_org", "LCCAN_aug", "LCCAN_both"
VARIANTS = (BASELINE, ORG, AUG, BOTH)


@dataclass(frozen=True)
class InferenceMode:
    variant: str = AUG
    use_ida: bool = True
    K: int = 1
    layers: tuple | None = None
    gamma: float | None = None
    tau: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.variant in (AUG, BOTH) and not self.use_ida:
            raise ValueError(f"{self.variant} needs IDA enabled")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(sorted(self.layers)))


def _aligner(model: LCCA | None, mode: InferenceMode) -> LCCA | None:
    if mode.variant == BASELINE:
        return None
    if model is None:
        raise ValueError(f"{mode.variant} needs trained LCCA parameters")
    if mode.layers is not None and mode.layers != model.cfg.layers:
        raise ValueError(f"mode asks for layers {mode.layers}, model was trained on {model.cfg.layers}")
    cfg = model.cfg
    if mode.gamma is not None:
        cfg = replace(cfg, gamma=mode.gamma)
    if mode.tau is not None:
        cfg = replace(cfg, tau=mode.tau)
    return LCCA(model.params, cfg)


def predict_episode(episode: Episode, backbone: Backbone, model: LCCA | None, mode: InferenceMode,
                    ida_cfg: IdaConfig = IdaConfig(), inner: InnerConfig = InnerConfig(),
                    expand=None, return_logits: bool = False):
    """Predict the query mask of one episode.

    ``expand(sample, i)`` overrides support augmentation (it returns the
    original followed by any extra copies); by default IDA is used when
    ``mode.use_ida`` is set.
    """
    aligner = _aligner(model, mode)
    if expand is None:
        expand = (lambda s, i: augment_support(s, ida_cfg)) if mode.use_ida else (lambda s, i: [s])
    with C.no_grad():
        groups = [expand(s, i) for i, s in enumerate(episode.support)]
        feats = [[backbone.features(s.image) for s in g] for g in groups]
        pyr_q, z_q = backbone.features(episode.query.image)
    theta = finetune_classifier([s for g in groups for s in g], backbone, inner, use_ida=False,
                                features=[z.data for fg in feats for _, z in fg])
    with C.no_grad():
        if aligner is None:
            z = z_q
        else:
            atts = []
            for fg in feats:
                org, aug = fg[0], fg[-1]
                if mode.variant == ORG:
                    atts.append(aligner.attend(pyr_q, *org))
                elif mode.variant == AUG or len(fg) == 1:
                    atts.append(aligner.attend(pyr_q, *aug))
                else:
                    a = C.add(aligner.attend(pyr_q, *org), aligner.attend(pyr_q, *aug))
                    atts.append(C.scale(a, 0.5))
            mean_att = atts[0] if len(atts) == 1 else C.scale(C.sum(C.stack(atts), axis=0), 1.0 / len(atts))
            z = blend(z_q, mean_att, aligner.cfg.gamma)
        logits = classify(z, theta).data
    mask = predict_mask(logits)
    return (mask, logits) if return_logits else mask


# ---------------------------------------------------------------- metrics

def episode_iou(pred, truth) -> float:
    p, t = np.asarray(pred) > 0.5, np.asarray(truth) > 0.5
    union = np.logical_or(p, t).sum()
    return float(np.logical_and(p, t).sum() / union) if union else float("nan")


@dataclass
class EvalReport:
    per_class_iou: dict
    per_fold_miou: dict
    miou: float
    n_episodes: int
    excluded_classes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    leakage: dict = field(default_factory=dict)
    timestamp: str = ""

    def to_dict(self) -> dict:
        return {"per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
                "per_fold_miou": {str(k): v for k, v in self.per_fold_miou.items()},
                "miou": self.miou, "n_episodes": self.n_episodes,
                "excluded_classes": self.excluded_classes, "config": self.config, "seed": self.seed,
                "leakage": self.leakage, "timestamp": self.timestamp}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def miou(per_episode) -> EvalReport:
    """Class-aggregated foreground IoU: per class, summed intersections over summed unions."""
    per_episode = list(per_episode)
    if not per_episode:
        raise ValueError("no episodes to score")
    inter, union = {}, {}
    for pred, truth, cls in per_episode:
        p, t = np.asarray(pred), np.asarray(truth)
        if p.shape != t.shape:
            raise ValueError("prediction and truth differ in shape")
        if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
            raise ValueError("masks must be binary")
        p, t = p > 0.5, t > 0.5
        cls = int(cls)
        inter[cls] = inter.get(cls, 0) + int(np.logical_and(p, t).sum())
        union[cls] = union.get(cls, 0) + int(np.logical_or(p, t).sum())
    per_class = {c: inter[c] / union[c] for c in sorted(union) if union[c] > 0}
    excluded = [c for c in sorted(union) if union[c] == 0]
    folds = {}
    for c, v in per_class.items():
        folds.setdefault(fold_of(c), []).append(v)
    per_fold = {f: float(np.mean(v)) for f, v in sorted(folds.items())}
    mean = float(np.mean(list(per_fold.values()))) if per_fold else float("nan")
    return EvalReport(per_class, per_fold, mean, len(per_episode), excluded)


# ---------------------------------------------------------------- evaluation runs

def _write_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_losses(path) -> list[float]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    return [float(r[-1]) for r in rows[1:]]


def write_plots(out_dir, ious, loss_csvs: dict | None = None) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(ious, bins=20, range=(0, 1), color="tab:blue")
    ax.set_xlabel("episode IoU")
    ax.set_ylabel("episodes")
    fig.tight_layout()
    fig.savefig(out_dir / "iou_hist.png", dpi=100)
    plt.close(fig)
    written.append("iou_hist.png")
    for name, path in (loss_csvs or {}).items():
        if not Path(path).exists():
            continue
        losses = _read_losses(path)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(losses, lw=0.8)
        if len(losses) >= 50:
            ax.plot(np.arange(49, len(losses)), np.convolve(losses, np.ones(50) / 50, "valid"), lw=2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(name)
        fig.tight_layout()
        fig.savefig(out_dir / f"loss_{name}.png", dpi=100)
        plt.close(fig)
        written.append(f"loss_{name}.png")
    return written


def eval_episodes(manifest: DatasetManifest, fold: int, n_episodes: int, K: int, seed: int) -> list[Episode]:
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    return [sample_episode(manifest, fold, K, "eval", seed, index=i) for i in range(n_episodes)]


def run_eval(manifest: DatasetManifest, fold: int, backbone: Backbone, model: LCCA | None,
             mode: InferenceMode = InferenceMode(), n_episodes: int = 200, seed: int = 0, out_dir=None,
             ida_cfg: IdaConfig = IdaConfig(), inner: InnerConfig = InnerConfig(),
             loss_csvs: dict | None = None, config: dict | None = None) -> EvalReport:
    if backbone is None:
        raise ValueError("missing backbone checkpoint")
    episodes = eval_episodes(manifest, fold, n_episodes, mode.K, seed)
    rows, scored = [], []
    for i, ep in enumerate(episodes):
        pred = predict_episode(ep, backbone, model, mode, ida_cfg, inner)
        scored.append((pred, ep.query.mask, ep.class_id))
        rows.append((i, ep.class_id, ep.query.sample_id, " ".join(str(s.sample_id) for s in ep.support),
                     f"{episode_iou(pred, ep.query.mask):.6f}"))
    report = miou(scored)
    allowed = set(episode_classes(manifest, fold, "eval"))
    touched = sorted({ep.class_id for ep in episodes}
                     | {s.class_id for ep in episodes for s in ep.support})
    report.leakage = {"fold": fold, "allowed_classes": sorted(allowed), "touched_classes": touched,
                      "clean": set(touched) <= allowed}
    report.seed = seed
    report.config = {"mode": {"variant": mode.variant, "use_ida": mode.use_ida, "K": mode.K,
                              "layers": list(model.cfg.layers) if model else None,
                              "gamma": mode.gamma if mode.gamma is not None else (model.cfg.gamma if model else None),
                              "tau": mode.tau if mode.tau is not None else (model.cfg.tau if model else None)},
                     "fold": fold, "n_episodes": n_episodes, **(config or {})}
    report.timestamp = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        _write_rows(out / "per_episode.csv", ["episode", "class_id", "query_id", "support_ids", "iou"], rows)
        write_plots(out, [float(r[-1]) for r in rows], loss_csvs)
    return report


# ---------------------------------------------------------------- ablations

def random_resize_crop(sample: Sample, rng: np.random.Generator, lo: float = 0.5, hi: float = 1.5,
                       pad_value: float = 0.5) -> Sample | None:
    """Uniform random rescale followed by a random 64x64 crop (or gray pad); None if the object is lost."""
    s = rng.uniform(lo, hi)
    size = sample.mask.shape[0]
    n = max(1, int(round(size * s)))
    img = resize_bilinear(sample.image, n, n)
    msk = resize_nearest(sample.mask, n, n)
    out_img = np.full_like(sample.image, pad_value)
    out_msk = np.zeros_like(sample.mask)
    if n >= size:
        y, x = rng.integers(0, n - size + 1, size=2)
        out_img[:] = img[:, y:y + size, x:x + size]
        out_msk[:] = msk[y:y + size, x:x + size]
    else:
        y, x = rng.integers(0, size - n + 1, size=2)
        out_img[:, y:y + n, x:x + n] = img
        out_msk[y:y + n, x:x + n] = msk
    if out_msk.sum() == 0:
        return None
    return replace(sample, image=out_img, mask=out_msk, branch="RDA")


def rda_expander(seed: int, episode_index: int):
    def expand(sample, i):
        extra = random_resize_crop(sample, rng_mod.stream(seed, "rda", episode_index, i))
        return [sample] if extra is None else [sample, extra]
    return expand


SUITES = ("ida", "pyramid", "lsa", "variants")


@dataclass
class AblationRow:
    suite: str
    row: str
    mode: InferenceMode
    model: LCCA | None = None
    support_aug: str = "ida"    # none | rda | ida


def _suite_rows(suite: str, manifest, fold, backbone, base_model, train_cfg: TrainConfig,
                meta_episodes: int | None, ida_cfg) -> list[AblationRow]:
    def trained(**overrides):
        # every row of a suite gets the same meta-training budget; the given
        # model is reused only when its budget is the one asked for
        cfg = replace(base_model.cfg, **overrides)
        budget = train_cfg.outer.episodes if meta_episodes is None else meta_episodes
        if cfg == base_model.cfg and budget == train_cfg.outer.episodes:
            return base_model
        tc = replace(train_cfg, outer=replace(train_cfg.outer, episodes=budget))
        log.info("training LCCA for ablation row %s", overrides)
        return meta_train(manifest, fold, backbone, tc, cfg, ida_cfg)[0]

    if suite == "ida":
        return [AblationRow(suite, "none", InferenceMode(BASELINE, use_ida=False), support_aug="none"),
                AblationRow(suite, "RDA", InferenceMode(BASELINE, use_ida=False), support_aug="rda"),
                AblationRow(suite, "IDA", InferenceMode(BASELINE, use_ida=True))]
    if suite == "pyramid":
        rows = []
        for name, layers in (("P5", (5,)), ("P4:5", (4, 5)), ("P3:5", (3, 4, 5))):
            rows.append(AblationRow(suite, name, InferenceMode(AUG), trained(layers=layers)))
        return rows
    if suite == "lsa":
        return [AblationRow(suite, "LSA on", InferenceMode(AUG), trained(use_lsa=True)),
                AblationRow(suite, "LSA off", InferenceMode(AUG), trained(use_lsa=False))]
    if suite == "variants":
        return [AblationRow(suite, "Baseline", InferenceMode(BASELINE)),
                AblationRow(suite, "org", InferenceMode(ORG), base_model),
                AblationRow(suite, "aug", InferenceMode(AUG), base_model),
                AblationRow(suite, "both", InferenceMode(BOTH), base_model)]
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")


def run_ablation(manifest: DatasetManifest, suite: str, backbone: Backbone, model: LCCA, fold: int = 0,
                 n_episodes: int = 100, seed: int = 0, K: int = 1, out_dir=None,
                 train_cfg: TrainConfig = TrainConfig(), meta_episodes: int | None = None,
                 ida_cfg: IdaConfig = IdaConfig(), inner: InnerConfig = InnerConfig()) -> dict:
    """Evaluate every row of ``suite`` on one shared episode stream.

    Deltas and changed-mask counts are taken against the first row. The
    pyramid and LSA suites meta-train one LCCA per row here, all with the
    ``meta_episodes`` budget (``model`` is reused when that budget equals
    ``train_cfg.outer.episodes``).
    """
    rows = _suite_rows(suite, manifest, fold, backbone, model, train_cfg, meta_episodes, ida_cfg)
    episodes = eval_episodes(manifest, fold, n_episodes, K, seed)
    preds = {}
    for r in rows:
        mode = replace(r.mode, K=K)
        out = []
        for i, ep in enumerate(episodes):
            expand = rda_expander(seed, i) if r.support_aug == "rda" else None
            out.append(predict_episode(ep, backbone, r.model, mode, ida_cfg, inner, expand=expand))
        preds[r.row] = out
    ref = rows[0].row
    ious = {name: [episode_iou(p, ep.query.mask) for p, ep in zip(ps, episodes)] for name, ps in preds.items()}
    table = []
    for r in rows:
        rep = miou((p, ep.query.mask, ep.class_id) for p, ep in zip(preds[r.row], episodes))
        deltas = np.array(ious[r.row]) - np.array(ious[ref])
        changed = sum(not np.array_equal(a, b) for a, b in zip(preds[r.row], preds[ref]))
        table.append({"suite": suite, "row": r.row, "miou": rep.miou, "mean_delta": float(deltas.mean()),
                      "changed_masks": changed, "changed_frac": changed / len(episodes)})
    result = {"suite": suite, "reference": ref, "n_episodes": len(episodes), "fold": fold, "K": K,
              "seed": seed, "table": table,
              "per_episode": [{"episode": i, "class_id": ep.class_id,
                               **{name: ious[name][i] for name in ious},
                               **{f"delta[{name}]": ious[name][i] - ious[ref][i] for name in ious if name != ref}}
                              for i, ep in enumerate(episodes)]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / f"ablation_{suite}.csv", ["suite", "row", "miou", "mean_delta", "changed_masks", "changed_frac"],
                    [(t["suite"], t["row"], f"{t['miou']:.6f}", f"{t['mean_delta']:+.6f}", t["changed_masks"],
                      f"{t['changed_frac']:.4f}") for t in table])
        header = list(result["per_episode"][0])
        _write_rows(out / f"ablation_{suite}_per_episode.csv", header,
                    [[f"{v:.6f}" if isinstance(v, float) else v for v in d.values()] for d in result["per_episode"]])
    return result
