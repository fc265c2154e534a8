"""Command-line entry point ``amc``.

Every command resolves its settings as flags > ``--config`` file > defaults,
where ``AMC_SEED`` overrides the built-in seed default.  The resolved settings
are printed and written to ``config.json`` in the command's run directory.
Run directories are never reused: if the requested one exists and is not
empty, ``DIR-1``, ``DIR-2``, ... are tried in turn.
"""
from __future__ import annotations

import os

# thread pools read these once, when numpy loads
if os.environ.get("AMC_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["AMC_THREADS"])

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .backbone import BackboneConfig, init_random_backbone, load_backbone, save_backbone
from .calibration import ensemble_logits, fit_platt
from .errors import AMCError, ContractError
from .interpret import box_mass_ratio, save_heatmap, volume_saliency
from .manifest import load_manifest, load_samples
from .metrics import metrics_report
from .plugin import load_plugin, new_plugin, save_plugin
from .synthetic import SyntheticSpec, generate_synthetic_dataset
from .train import FocalLossConfig, OptimizerConfig, TrainConfig, predict_logits, train_plugin

log = logging.getLogger("amc3d")

DEFAULTS: dict[str, dict] = {
    "backbone-init": {"out": None, "image_size": 64, "patch_size": 8, "embed_dim": 64, "depth": 4,
                      "heads": 4, "registers": 0, "seed": 0},
    "synth": {"out": "runs/synth", "n": 400, "pos_rate": 0.3, "views": 1, "masks": False,
              "size": [64, 64, 16], "radius": [8.0, 14.0], "seed": 0},
    "train": {"manifest": None, "backbone": None, "plugin_out": None, "run_dir": "runs/train",
              "lambda_seg": 1.0, "focal_gamma": 2.0, "focal_alpha": 0.25, "epochs": 100,
              "batch_size": 2, "patience": None, "lora_lr": 1e-4, "head_lr": 1e-3, "rank": 8,
              "alpha": 16.0, "task_id": "task", "seed": 0},
    "infer": {"backbone": None, "plugin": None, "manifest": None, "out": "runs/infer",
              "split": "test", "raw": False},
    "heatmap": {"backbone": None, "plugin": None, "manifest": None, "out": "runs/heatmap",
                "mode": "last", "split": "test", "ids": None, "class_index": 0,
                "positives_only": False},
    "calibrate": {"preds": None, "labels": None, "plugin": None, "plugin_out": None,
                  "out": "runs/calibrate"},
    "ensemble": {"plugins": None, "backbone": None, "manifest": None, "out": "runs/ensemble",
                 "split": "test"},
    "eval": {"preds": None, "labels": None, "youden": False, "threshold": 0.0, "out": "runs/eval"},
}
REQUIRED = {
    "backbone-init": ["out"], "train": ["manifest", "backbone"],
    "infer": ["backbone", "plugin", "manifest"], "heatmap": ["backbone", "plugin", "manifest"],
    "calibrate": ["preds", "labels", "plugin"], "ensemble": ["plugins", "backbone", "manifest"],
    "eval": ["preds", "labels"],
}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amc",
        description="Volumetric classification with a frozen backbone and per-task plugins.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with settings (flat or keyed by command)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    # every option defaults to None so explicit flags can be told apart
    p = cmd("backbone-init", "write a randomly initialised toy backbone")
    p.add_argument("--out")
    p.add_argument("--image-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--registers", type=int)
    p.add_argument("--seed", type=int)

    p = cmd("synth", "generate a synthetic lesion dataset")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--pos-rate", type=float)
    p.add_argument("--views", type=int, choices=(1, 2))
    p.add_argument("--masks", action="store_true", default=None)
    p.add_argument("--size", type=int, nargs=3, metavar=("H", "W", "S"))
    p.add_argument("--radius", type=float, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--seed", type=int)

    p = cmd("train", "train a task plugin on a frozen backbone")
    p.add_argument("--manifest")
    p.add_argument("--backbone")
    p.add_argument("--plugin-out")
    p.add_argument("--run-dir")
    p.add_argument("--lambda-seg", type=float)
    p.add_argument("--focal-gamma", type=float)
    p.add_argument("--focal-alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lora-lr", type=float)
    p.add_argument("--head-lr", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--task-id")
    p.add_argument("--seed", type=int)

    for name, help_ in (("infer", "write per-record scores"),
                        ("heatmap", "write 3D saliency volumes")):
        p = cmd(name, help_)
        p.add_argument("--backbone")
        p.add_argument("--plugin")
        p.add_argument("--manifest")
        p.add_argument("--out")
        p.add_argument("--split", choices=("train", "val", "test", "all"))
    sub.choices["infer"].add_argument("--raw", action="store_true", default=None,
                                      help="skip the plugin's calibration")
    p = sub.choices["heatmap"]
    p.add_argument("--mode", choices=("last", "rollout", "grad-rollout", "grad-rollout-last"))
    p.add_argument("--ids", help="comma-separated record ids")
    p.add_argument("--class-index", type=int)
    p.add_argument("--positives-only", action="store_true", default=None)

    p = cmd("calibrate", "fit Platt scaling and store it in the plugin")
    p.add_argument("--preds")
    p.add_argument("--labels")
    p.add_argument("--plugin")
    p.add_argument("--plugin-out")
    p.add_argument("--out")

    p = cmd("ensemble", "average calibrated outputs of several plugins")
    p.add_argument("--plugins", help="comma-separated plugin files")
    p.add_argument("--backbone")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--split", choices=("train", "val", "test", "all"))

    p = cmd("eval", "metrics report from scores and labels")
    p.add_argument("--preds")
    p.add_argument("--labels")
    p.add_argument("--youden", action="store_true", default=None)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    return parser


def resolve_config(command: str, args: argparse.Namespace, environ=os.environ) -> dict:
    cfg = dict(DEFAULTS[command])
    if "seed" in cfg and environ.get("AMC_SEED"):
        cfg["seed"] = int(environ["AMC_SEED"])
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        layer = {k: v for k, v in raw.items() if k not in DEFAULTS}
        layer.update(raw.get(command, {}))
        layer = {k.replace("-", "_"): v for k, v in layer.items()}
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ContractError(f"unknown settings for {command!r} in {args.config}: {unknown}")
        cfg.update(layer)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k in REQUIRED.get(command, []) if cfg.get(k) is None]
    if missing:
        raise ContractError(f"{command}: missing required setting(s) "
                            + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def fresh_run_dir(path) -> Path:
    base = Path(path)
    candidate, k = base, 0
    while candidate.exists() and (not candidate.is_dir() or any(candidate.iterdir())):
        k += 1
        candidate = base.with_name(f"{base.name}-{k}")
    candidate.mkdir(parents=True, exist_ok=True)
    return candidate


def _echo(run_dir: Path, command: str, cfg: dict) -> None:
    record = {"command": command, "version": __version__,
              "precision": os.environ.get("AMC_PRECISION", "f32"), "settings": cfg,
              "run_dir": str(run_dir)}
    text = json.dumps(record, indent=2)
    (run_dir / "config.json").write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------- TSV files

def write_scores(path, ids, scores: np.ndarray, class_names) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", *class_names])
        for rid, row in zip(ids, np.atleast_2d(scores)):
            w.writerow([rid, *(repr(float(v)) for v in row)])


def read_scores(path) -> tuple[list[str], np.ndarray, list[str]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    if not rows or len(rows[0]) < 2 or rows[0][0] != "id":
        raise ContractError(f"{path}: expected a header row 'id<TAB>class...'")
    header, body = rows[0], rows[1:]
    if any(len(r) != len(header) for r in body):
        raise ContractError(f"{path}: ragged rows")
    try:
        values = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise ContractError(f"{path}: {exc}") from None
    return [r[0] for r in body], values.reshape(len(body), len(header) - 1), header[1:]


def _aligned(preds, labels):
    pid, z, names = read_scores(preds)
    lid, y, _ = read_scores(labels)
    index = {r: i for i, r in enumerate(lid)}
    missing = [r for r in pid if r not in index]
    if missing:
        raise ContractError(f"no labels for {len(missing)} record(s), e.g. {missing[0]}")
    y = y[[index[r] for r in pid]]
    if y.shape != z.shape:
        raise ContractError(f"scores {z.shape} and labels {y.shape} disagree")
    return pid, z, y.astype(int), names


# ---------------------------------------------------------------- commands

def _load_backbone(path):
    w = load_backbone(path)
    return w.astype(T.get_dtype()) if T.get_dtype() != np.float32 else w


def _records(manifest, split):
    return load_samples(manifest, None if split == "all" else split, masks=False)


def cmd_backbone_init(cfg, run_dir):
    out = Path(cfg["out"])
    if out.exists():
        raise ContractError(f"{out} exists; backbone files are never overwritten")
    conf = BackboneConfig(image_size=(cfg["image_size"],) * 2, patch_size=cfg["patch_size"],
                          embed_dim=cfg["embed_dim"], depth=cfg["depth"], num_heads=cfg["heads"],
                          register_tokens=cfg["registers"])
    w = init_random_backbone(conf, cfg["seed"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_backbone(out, w)
    print(f"backbone {out}  params {w.num_parameters()}  fingerprint {w.fingerprint()}")


def cmd_synth(cfg, run_dir):
    spec = SyntheticSpec(n=cfg["n"], pos_rate=cfg["pos_rate"], views=cfg["views"],
                         masks=bool(cfg["masks"]), size=tuple(cfg["size"]),
                         radius=tuple(cfg["radius"]))
    m = generate_synthetic_dataset(run_dir, spec, cfg["seed"])
    pos = sum(r.label[0] for r in m.records)
    print(f"wrote {len(m.records)} records ({pos} positive) to {run_dir / 'manifest.json'}")


def cmd_train(cfg, run_dir):
    w = _load_backbone(cfg["backbone"])
    m = load_manifest(cfg["manifest"])
    train, val = load_samples(m, "train"), load_samples(m, "val")
    use_masks = cfg["lambda_seg"] > 0 and any(s.mask is not None for s in train)
    plugin = new_plugin(w, m.num_classes, m.num_views, cfg["rank"], cfg["alpha"], cfg["seed"],
                        decoder=use_masks, label_mode=m.label_mode, task_id=cfg["task_id"],
                        slice_axes=m.slice_axes, class_names=m.class_names)
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                     lambda_seg=cfg["lambda_seg"],
                     focal=FocalLossConfig(cfg["focal_gamma"], cfg["focal_alpha"]),
                     optim=OptimizerConfig(lora_lr=cfg["lora_lr"], head_lr=cfg["head_lr"]),
                     patience=cfg["patience"], seed=cfg["seed"])
    with open(run_dir / "history.tsv", "w") as hist:
        hist.write("epoch\tloss\tcls_loss\tseg_loss\tval_auroc\tseconds\n")

        def on_epoch(rec):
            print(rec.line(), flush=True)
            hist.write(f"{rec.epoch}\t{rec.loss}\t{rec.cls_loss}\t{rec.seg_loss}\t"
                       f"{rec.val_auroc}\t{rec.seconds}\n")
            hist.flush()

        result = train_plugin(plugin, w, train, val, tc, on_epoch)
    out = Path(cfg["plugin_out"]) if cfg["plugin_out"] else run_dir / "plugin.amcp"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_plugin(out, plugin)
    print(f"best epoch {result.best_epoch}  val AUROC {result.best_auroc:.4f}  "
          f"trainable {plugin.num_trainable()}  plugin {out}")


def _write_labels(path, samples, names):
    write_scores(path, [s.id for s in samples], np.stack([s.label for s in samples]), names)


def cmd_infer(cfg, run_dir):
    w = _load_backbone(cfg["backbone"])
    plugin = load_plugin(cfg["plugin"], w)
    m = load_manifest(cfg["manifest"])
    samples = _records(m, cfg["split"])
    z = predict_logits(samples, plugin, w)
    if not cfg["raw"]:
        z = plugin.calibrated_logits(z)
    names = plugin.class_names or m.class_names
    write_scores(run_dir / "predictions.tsv", [s.id for s in samples], z, names)
    _write_labels(run_dir / "labels.tsv", samples, names)
    print(f"scored {len(samples)} records -> {run_dir / 'predictions.tsv'}")


def cmd_ensemble(cfg, run_dir):
    w = _load_backbone(cfg["backbone"])
    m = load_manifest(cfg["manifest"])
    samples = _records(m, cfg["split"])
    paths = [p for p in cfg["plugins"].split(",") if p]
    members = []
    for p in paths:
        plugin = load_plugin(p, w)
        members.append(plugin.calibrated_logits(predict_logits(samples, plugin, w)))
    names = plugin.class_names or m.class_names
    write_scores(run_dir / "predictions.tsv", [s.id for s in samples], ensemble_logits(members),
                 names)
    _write_labels(run_dir / "labels.tsv", samples, names)
    print(f"ensembled {len(members)} plugin(s) over {len(samples)} records")


def cmd_heatmap(cfg, run_dir):
    w = _load_backbone(cfg["backbone"])
    plugin = load_plugin(cfg["plugin"], w)
    m = load_manifest(cfg["manifest"])
    samples = _records(m, cfg["split"])
    if cfg["ids"]:
        wanted = set(cfg["ids"].split(","))
        samples = [s for s in samples if s.id in wanted]
    if cfg["positives_only"]:
        samples = [s for s in samples if s.label[cfg["class_index"]]]
    with open(run_dir / "heatmaps.tsv", "w") as f:
        f.write("id\tfile\tmass\tbox_ratio\n")
        for s in samples:
            hm = volume_saliency(s.views, plugin, w, cfg["mode"], cfg["class_index"],
                                 normalize=False)
            name = f"{s.id}_heatmap.amcv"
            save_heatmap(run_dir / name, hm.max_normalized())
            ratio = f"{box_mass_ratio(hm, s.boxes):.6g}" if s.boxes else ""
            f.write(f"{s.id}\t{name}\t{hm.mass:.6g}\t{ratio}\n")
    print(f"wrote {len(samples)} heatmap(s) to {run_dir}")


def cmd_calibrate(cfg, run_dir):
    plugin = load_plugin(cfg["plugin"])
    _, z, y, _ = _aligned(cfg["preds"], cfg["labels"])
    plugin.platt = fit_platt(z, y)
    (run_dir / "platt.json").write_text(json.dumps(plugin.platt.to_dict(), indent=2) + "\n")
    out = Path(cfg["plugin_out"]) if cfg["plugin_out"] else run_dir / "plugin.amcp"
    save_plugin(out, plugin)
    print(f"calibrated plugin -> {out}")


def cmd_eval(cfg, run_dir):
    _, z, y, names = _aligned(cfg["preds"], cfg["labels"])
    thresholds = "youden" if cfg["youden"] else cfg["threshold"]
    report = metrics_report(z, y, names, thresholds=thresholds)
    (run_dir / "metrics.json").write_text(report.to_json() + "\n")
    for c in report.classes:
        print(f"{c.name}\tAUROC {c.auroc:.4f}\tthreshold {c.threshold:.4g}\t"
              f"sens {c.sensitivity:.3f}\tspec {c.specificity:.3f}\tF1 {c.f1:.3f}")


COMMANDS = {"backbone-init": cmd_backbone_init, "synth": cmd_synth, "train": cmd_train,
            "infer": cmd_infer, "heatmap": cmd_heatmap, "calibrate": cmd_calibrate,
            "ensemble": cmd_ensemble, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)          # usage errors exit 2 here
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        with T.precision(os.environ.get("AMC_PRECISION", "f32")):
            if args.command == "backbone-init":
                run_dir = None
                print(json.dumps({"command": args.command, "settings": cfg}, indent=2))
            else:
                key = "run_dir" if args.command == "train" else "out"
                run_dir = fresh_run_dir(cfg[key])
                _echo(run_dir, args.command, cfg)
            COMMANDS[args.command](cfg, run_dir)
    except (AMCError, OSError, json.JSONDecodeError) as exc:
        print(f"amc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
