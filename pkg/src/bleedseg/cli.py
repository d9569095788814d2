"""Command-line entry point.

Exit codes: 0 on success, 1 for usage/config/data errors, 2 when an
experiment finished but one or more grid cells failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from .data import (
    generate_synthetic,
    load_annotation,
    load_image,
    rasterize_polygons,
    save_image,
    save_mask,
)
from .experiment import ExperimentSpec, run_experiment
from .metrics import evaluate, report_to_csv
from .trainer import config_fingerprint, load_checkpoint, predict, train

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; this tool reserves 2 for cell failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out_dir(path: str, force: bool) -> Path:
    p = Path(path)
    if p.exists() and any(p.iterdir()) and not force:
        raise ValueError(f"{p} exists and is not empty; pass --force to overwrite")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _out_file(path: str, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise ValueError(f"{p} exists; pass --force to overwrite")
    if p.parent != Path(""):
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_app_config(args) -> cfgmod.AppConfig:
    if args.config is None:
        return cfgmod.AppConfig()
    return cfgmod.load_config(args.config)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _snapshot_yaml(model_cfg, train_cfg, data_cfg) -> str:
    """Resolved run configuration; feeding it back via --config reproduces the run."""
    doc = {"model": _plain(asdict(model_cfg)), "train": _plain(asdict(train_cfg)),
           "data": _plain(asdict(data_cfg))}
    return yaml.safe_dump(doc, sort_keys=True)


def _data_hash(data_cfg) -> str:
    payload = json.dumps(_plain(asdict(data_cfg)), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _add_common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--force", action="store_true",
                   help="overwrite existing output")


def cmd_generate_data(args) -> int:
    out = _out_dir(args.out, args.force)
    seed = 0 if args.seed is None else args.seed
    samples = generate_synthetic(seed, n_patients=args.patients,
                                 images_per_patient=args.images_per_patient,
                                 side=args.side)
    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    assignments: dict[str, list[str]] = {}
    for s in samples:
        save_image(out / "images" / f"{s.id}.png", s.pixels)
        save_mask(out / "masks" / f"{s.id}.png", s.mask)
        assignments.setdefault(s.patient_id, []).append(s.id)
    manifest = {
        "seed": seed,
        "side": args.side,
        "patients": args.patients,
        "images_per_patient": args.images_per_patient,
        "image_count": len(samples),
        "assignments": assignments,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(samples)} images for {args.patients} patients to {out}")
    return 0


def cmd_train(args) -> int:
    app = _load_app_config(args)
    tc = app.train
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.mode is not None:
        tc = replace(tc, mode=args.mode)
    if args.budget is not None:
        budget = args.budget if args.budget == "all" else int(args.budget)
        tc = replace(tc, label_budget=budget)
    out = _out_dir(args.out, args.force)
    (out / "config.yaml").write_text(_snapshot_yaml(app.model, tc, app.data))
    split = cfgmod.build_split(app.data)
    ckpt = train(tc, split, app.model, out_dir=out)
    data_hash = _data_hash(app.data)
    for man_path in sorted(out.glob("checkpoint_*/manifest.json")):
        man = json.loads(man_path.read_text())
        man["data_hash"] = data_hash
        man_path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(f"trained {ckpt.iteration} iterations ({ckpt.epoch} epochs); "
          f"checkpoint at {out / 'checkpoint_final'}")
    if split.val:
        report = evaluate(ckpt, split.val)
        (out / "metrics.csv").write_text(report_to_csv(report))
        print(f"val dice {report.aggregate.dice:.4f} miou {report.aggregate.miou:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    app = _load_app_config(args)
    out = _out_file(args.out, args.force)
    ckpt = load_checkpoint(args.checkpoint)
    resolved = config_fingerprint(app.model, app.train)
    if ckpt.config_hash != resolved:
        log.warning(
            "checkpoint config hash %.12s differs from the resolved config %.12s; "
            "pass the run's config.yaml snapshot to evaluate under the recorded setup",
            ckpt.config_hash, resolved)
    try:
        recorded = json.loads(
            (Path(args.checkpoint) / "manifest.json").read_text()).get("data_hash")
    except OSError:
        recorded = None
    if recorded is not None and recorded != _data_hash(app.data):
        log.warning("checkpoint was trained on a different data configuration "
                    "than the one being evaluated")
    split = cfgmod.build_split(app.data)
    samples = split.val if split.val else split.train
    report = evaluate(ckpt, samples)
    out.write_text(report_to_csv(report))
    a = report.aggregate
    print(f"evaluated {len(report.per_image)} images: dice {a.dice:.4f} "
          f"miou {a.miou:.4f} sensitivity {a.sensitivity:.4f} precision {a.precision:.4f}")
    return 0


def cmd_predict(args) -> int:
    out = _out_file(args.out, args.force)
    ckpt = load_checkpoint(args.checkpoint)
    pixels = load_image(args.image)
    mask = predict(ckpt, pixels)
    save_mask(out, mask)
    if args.overlay:
        overlay_path = _out_file(args.overlay, args.force)
        overlay = pixels.copy()
        fg = mask.astype(bool)
        tint = np.array([1.0, 0.15, 0.15], dtype=np.float32)
        overlay[fg] = (0.55 * overlay[fg] + 0.45 * tint).astype(np.float32)
        save_image(overlay_path, overlay)
    print(f"predicted {int(mask.sum())} foreground pixels -> {out}")
    return 0


def cmd_experiment(args) -> int:
    app = _load_app_config(args)
    spec = app.experiment
    tc = app.train
    if args.seed is not None:
        spec = replace(spec, seeds=(args.seed,))
    out = _out_dir(args.out, args.force)
    split = cfgmod.build_split(app.data)
    result = run_experiment(spec, split, app.model, tc, out)
    print(f"{len(result.cells) - len(result.failed)}/{len(result.cells)} cells "
          f"succeeded; results at {out / 'results.csv'}")
    if result.failed:
        for c in result.failed:
            print(f"failed: {c.label}: {c.error}", file=sys.stderr)
        return 2
    return 0


def cmd_rasterize(args) -> int:
    out = _out_file(args.out, args.force)
    ann = load_annotation(Path(args.annotation).read_text())
    mask = rasterize_polygons(ann)
    save_mask(out, mask)
    print(f"rasterized {len(ann.shapes)} polygons to {out} "
          f"({int(mask.sum())} foreground pixels)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bleedseg",
                     description="semi-supervised bleeding-region segmentation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write a synthetic dataset to disk")
    _add_common(p, "output dataset directory")
    p.add_argument("--patients", type=int, default=7)
    p.add_argument("--images-per-patient", type=int, default=40)
    p.add_argument("--side", type=int, default=64)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one model")
    _add_common(p, "run directory for checkpoint and logs")
    p.add_argument("--mode", choices=["semi", "fully"],
                   help="override the configured training mode")
    p.add_argument("--budget", help="override the label budget (int or 'all')")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the validation split")
    _add_common(p, "metrics CSV path")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment a single image")
    _add_common(p, "output mask PNG path")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--image", required=True, help="input image PNG")
    p.add_argument("--overlay", help="also write a mask-tinted copy of the input")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run the label-budget grid")
    _add_common(p, "experiment output directory")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("rasterize", help="polygon annotation JSON -> mask PNG")
    _add_common(p, "output mask PNG path")
    p.add_argument("--annotation", required=True, help="annotation JSON file")
    p.set_defaults(func=cmd_rasterize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
