"""Command line entry point.

All subcommands share one workspace directory (``--out``)::

    <out>/data        gen-data
    <out>/backbone    pretrain
    <out>/lcca        metatrain
    <out>/eval        eval
    <out>/ablation    ablate
    <out>/augment     augment

Failures exit nonzero and print a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from . import tenfile
from .harness import SUITES, VARIANTS, InferenceMode, run_ablation, run_eval
from .ida import IdaConfig, augment_support, foreground_ratio
from .lcca import AlignConfig
from .synthia import DataConfig, generate_dataset, load_dataset
from .training import TrainConfig, load_backbone, load_lcca, meta_train, pretrain, save_backbone

log = logging.getLogger("lccan")


def default_config() -> dict:
    return json.loads(resources.files("lccan").joinpath("default_config.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, seed=None) -> dict:
    cfg = default_config()
    if path:
        cfg = _merge(cfg, json.loads(Path(path).read_text()))
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _train_cfg(cfg) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})


def _align_cfg(cfg) -> AlignConfig:
    a = dict(cfg["align"])
    a["layers"] = tuple(a["layers"])
    return AlignConfig(**a)


class _JsonErrorParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file merged over the shipped defaults")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--fold", type=int, default=0, choices=range(4))
    common.add_argument("--shots", type=int, default=1, help="support size K")
    common.add_argument("--mode", choices=VARIANTS, help="inference variant (default from config)")
    common.add_argument("--out", default="run", help="workspace directory")
    common.add_argument("--data", help="dataset directory (default <out>/data)")
    common.add_argument("--backbone", help="backbone checkpoint (default <out>/backbone)")
    common.add_argument("--lcca", help="LCCA checkpoint (default <out>/lcca)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _JsonErrorParser(prog="lccan", description="Few-shot segmentation with local-consensus cross attention.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_JsonErrorParser)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("pretrain", parents=[common], help="stage-1 backbone pretraining")
    sub.add_parser("metatrain", parents=[common], help="episodic LCCA meta-training")
    ev = sub.add_parser("eval", parents=[common], help="evaluate on held-out episodes")
    ev.add_argument("--episodes", type=int, help="number of evaluation episodes")
    ab = sub.add_parser("ablate", parents=[common], help="paired ablation suite")
    ab.add_argument("--suite", choices=SUITES + ("all",), default="all")
    ab.add_argument("--episodes", type=int)
    ab.add_argument("--meta-episodes", type=int, help="budget for LCCA variants trained inside the suite")
    au = sub.add_parser("augment", parents=[common], help="apply IDA to dataset samples")
    au.add_argument("--ids", type=int, nargs="*", help="sample ids (default: all)")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--ops", nargs="*", help="subset of ops (default: all)")
    gc.add_argument("--seeds", type=int, default=5)
    gc.add_argument("--no-composite", action="store_true")
    return p


def _paths(args):
    out = Path(args.out)
    return (Path(args.data or out / "data"), Path(args.backbone or out / "backbone"),
            Path(args.lcca or out / "lcca"), out)


def _need(path: Path, what: str) -> Path:
    if not (path / "meta.json").exists() and not (path / "manifest.jsonl").exists():
        raise FileNotFoundError(f"missing {what} at {path}")
    return path


def cmd_gen_data(args, cfg):
    data, *_ = _paths(args)
    m = generate_dataset(DataConfig.from_dict(cfg["data"]), cfg["seed"], data)
    return {"dataset": str(data), "samples": len(m.samples), "classes": len(m.classes)}


def cmd_pretrain(args, cfg):
    data, bb, _, _ = _paths(args)
    manifest = load_dataset(_need(data, "dataset"))
    _, _, losses = pretrain(manifest, args.fold, _train_cfg(cfg), out_dir=bb)
    return {"checkpoint": str(bb), "epoch_losses": losses}


def cmd_metatrain(args, cfg):
    data, bb, lc, _ = _paths(args)
    manifest = load_dataset(_need(data, "dataset"))
    net, meta = load_backbone(_need(bb, "backbone checkpoint"))
    if meta.get("fold") != args.fold:
        raise ValueError(f"backbone was pretrained on fold {meta.get('fold')}, not {args.fold}")
    tc = _train_cfg(cfg)
    tc.outer.shots = args.shots
    _, losses = meta_train(manifest, args.fold, net, tc, _align_cfg(cfg), IdaConfig(**cfg["ida"]), out_dir=lc)
    n = min(50, len(losses))
    return {"checkpoint": str(lc), "episodes": len(losses),
            "first50_dice": sum(losses[:n]) / max(n, 1), "last50_dice": sum(losses[-n:]) / max(n, 1)}


def _load_models(args, cfg, variant):
    data, bb, lc, _ = _paths(args)
    manifest = load_dataset(_need(data, "dataset"))
    net, _ = load_backbone(_need(bb, "backbone checkpoint"))
    model = None
    if variant != "Baseline" or (lc / "meta.json").exists():
        model = load_lcca(_need(lc, "LCCA checkpoint"))
    return manifest, net, model, bb, lc


def cmd_eval(args, cfg):
    variant = args.mode or cfg["eval"]["variant"]
    manifest, net, model, bb, lc = _load_models(args, cfg, variant)
    mode = InferenceMode(variant, use_ida=cfg["eval"]["use_ida"], K=args.shots)
    out = Path(args.out) / "eval"
    rep = run_eval(manifest, args.fold, net, model, mode, args.episodes or cfg["eval"]["n_episodes"],
                   cfg["seed"], out, IdaConfig(**cfg["ida"]), _train_cfg(cfg).inner,
                   loss_csvs={"pretrain": bb / "losses.csv", "metatrain": lc / "losses.csv"},
                   config={"run": cfg})
    return {"report": str(out / "report.json"), "miou": rep.miou, "leakage_clean": rep.leakage["clean"]}


def cmd_ablate(args, cfg):
    manifest, net, model, _, _ = _load_models(args, cfg, "LCCAN_aug")
    suites = SUITES if args.suite == "all" else (args.suite,)
    ab = cfg["ablation"]
    out = Path(args.out) / "ablation"
    summary = {}
    for suite in suites:
        res = run_ablation(manifest, suite, net, model, args.fold, args.episodes or ab["n_episodes"], cfg["seed"],
                           args.shots, out, _train_cfg(cfg), args.meta_episodes or ab["meta_episodes"],
                           IdaConfig(**cfg["ida"]), _train_cfg(cfg).inner)
        summary[suite] = res["table"]
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"ablation": str(out), "suites": list(suites)}


def cmd_augment(args, cfg):
    data, _, _, _ = _paths(args)
    manifest = load_dataset(_need(data, "dataset"))
    ida = IdaConfig(**cfg["ida"])
    out = Path(args.out) / "augment"
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    ids = args.ids if args.ids else [s.sample_id for s in manifest.samples]
    rows = []
    for sid in ids:
        if not 0 <= sid < len(manifest.samples):
            raise ValueError(f"no sample with id {sid}")
        s = manifest.samples[sid]
        copies = augment_support(s, ida)
        aug = copies[-1]
        branch = aug.branch if len(copies) > 1 else "None"
        if len(copies) > 1:
            tenfile.save(out / "images" / f"{sid:05d}.ten", aug.image)
            tenfile.save(out / "masks" / f"{sid:05d}.ten", aug.mask)
        rows.append((sid, f"{s.mu:.6f}", branch, f"{foreground_ratio(aug.mask):.6f}"))
    with (out / "augment.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "mu_before", "branch", "mu_after"])
        w.writerows(rows)
    counts = {b: sum(r[2] == b for r in rows) for b in ("Crop", "Downsize", "None")}
    return {"csv": str(out / "augment.csv"), "branches": counts}


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_suite
    results = run_suite(range(args.seeds), ops=args.ops, composite=not args.no_composite)
    lines = {}
    for name, reps in results.items():
        worst = max(r.max_error for r in reps)
        ok = all(r.passed for r in reps)
        lines[name] = {"max_rel_err": worst, "passed": ok}
        print(f"{'PASS' if ok else 'FAIL'} {name:<18} max_rel_err={worst:.2e} over {len(reps)} seeds")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.json").write_text(json.dumps(lines, indent=2, sort_keys=True) + "\n")
    failed = [k for k, v in lines.items() if not v["passed"]]
    if failed:
        raise AssertionError(f"gradient check failed for {failed}")
    return {"ops": len(lines)}


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "metatrain": cmd_metatrain,
            "eval": cmd_eval, "ablate": cmd_ablate, "augment": cmd_augment, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        result = COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    print(json.dumps({"ok": True, "command": args.command, **result}, default=str))
    return 0
