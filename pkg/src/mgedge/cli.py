"""Command-line surface: train, infer, evaluate, ablate, build-labels.

Configuration comes from a flat ``key=value`` file (dotted keys reach nested
sections, e.g. ``provider.seed=3``) with ``--set`` overrides applied on top.
The feature cache directory can also be set via ``MGEDGE_CACHE_DIR``.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from .backbone import ProviderConfig
from .data import (
    AugmentConfig,
    load_manifest,
    load_samples,
    load_mask_png,
    save_image_png,
    save_mask_png,
    stable_rng,
)
from .errors import InputError, MgedgeError
from .evaluation import EvalConfig, best_match_evaluate, evaluate
from .granularity import AnnotationSet, make_ladder
from .stn import StnConfig
from .train import AblationSwitches, TrainConfig, infer, run_training


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def read_config_items(path: str | None, overrides: list[str]) -> dict[str, object]:
    items: dict[str, object] = {}
    if path:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, raw = line.partition("=")
                items[key.strip()] = _parse_value(raw.strip())
    for entry in overrides:
        if "=" not in entry:
            raise InputError(f"--set expects key=value, got {entry!r}")
        key, _, raw = entry.partition("=")
        items[key.strip()] = _parse_value(raw.strip())
    return items


def train_config_from_items(items: dict[str, object]) -> TrainConfig:
    sections: dict[str, dict] = {"provider": {}, "stn": {}, "augment": {}}
    flat: dict[str, object] = {}
    for key, value in items.items():
        if "." in key:
            section, _, sub = key.partition(".")
            if section not in sections:
                raise InputError(f"unknown config section {section!r}")
            sections[section][sub] = value
        else:
            flat[key] = value
    if "scales" in sections["augment"]:
        sections["augment"]["scales"] = tuple(sections["augment"]["scales"])
    if "head_factors" in sections["stn"]:
        sections["stn"]["head_factors"] = tuple(sections["stn"]["head_factors"])
    cfg = TrainConfig(
        provider=ProviderConfig(**sections["provider"]),
        stn=StnConfig(**sections["stn"]) if sections["stn"] else None,
        augment=AugmentConfig(**sections["augment"]),
        **flat,
    )
    return cfg


def _cmd_train(args, switches: AblationSwitches | None = None) -> int:
    items = read_config_items(args.config, args.set or [])
    cfg = train_config_from_items(items)
    result = run_training(
        cfg,
        args.manifest,
        args.out_dir,
        switches=switches,
        resume=args.resume,
        log_every=args.log_every,
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"steps: {len(result.log)}")
    if result.log:
        print(f"final l_total: {result.log[-1]['l_total']:.6f}")
    return 0


def _cmd_ablate(args) -> int:
    switches = AblationSwitches(
        soc_off=args.soc_off, guide_off=args.guide_off, differ_off=args.differ_off
    )
    return _cmd_train(args, switches=switches)


def _cmd_infer(args) -> int:
    from .data import load_image_png

    image = load_image_png(args.image)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    os.makedirs(args.out_dir, exist_ok=True)
    if args.alpha is not None and args.candidates is not None:
        raise InputError("give at most one of --alpha and --candidates")
    if args.candidates is not None:
        maps = infer(args.checkpoint, image, m=args.candidates)
        for k, grid in enumerate(maps):
            save_image_png(os.path.join(args.out_dir, f"{stem}_a{k:02d}.png"), grid)
        print(f"wrote {len(maps)} candidate maps to {args.out_dir}")
    elif args.alpha is not None:
        grid = infer(args.checkpoint, image, alpha=args.alpha)
        path = os.path.join(args.out_dir, f"{stem}_alpha{args.alpha:g}.png")
        save_image_png(path, grid)
        print(f"wrote {path}")
    else:
        grid = infer(args.checkpoint, image)
        path = os.path.join(args.out_dir, f"{stem}.png")
        save_image_png(path, grid)
        print(f"wrote {path}")
    return 0


def _load_prob_png(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / 255.0


def _gather_eval_inputs(pred_dir: str, gt_dir: str, candidates: int | None):
    ids = sorted(
        d for d in os.listdir(gt_dir) if os.path.isdir(os.path.join(gt_dir, d))
    )
    if not ids:
        raise InputError(f"no ground-truth subdirectories under {gt_dir}")
    gts, preds = [], []
    for image_id in ids:
        ann_paths = sorted(glob.glob(os.path.join(gt_dir, image_id, "*.png")))
        if not ann_paths:
            raise InputError(f"no annotation PNGs for {image_id}")
        gts.append(AnnotationSet([load_mask_png(p) for p in ann_paths]))
        if candidates is None:
            path = os.path.join(pred_dir, f"{image_id}.png")
            if not os.path.exists(path):
                raise InputError(f"missing prediction {path}")
            preds.append(_load_prob_png(path))
        else:
            cands = []
            for k in range(candidates):
                path = os.path.join(pred_dir, f"{image_id}_a{k:02d}.png")
                if not os.path.exists(path):
                    raise InputError(f"missing candidate {path}")
                cands.append(_load_prob_png(path))
            preds.append(cands)
    return preds, gts


def _cmd_evaluate(args) -> int:
    cfg = EvalConfig(
        tolerance=args.tolerance, thresholds=args.thresholds, apply_nms=not args.no_nms
    )
    preds, gts = _gather_eval_inputs(args.pred_dir, args.gt_dir, args.candidates)
    if args.candidates is None:
        report = evaluate(preds, gts, cfg)
    else:
        report = best_match_evaluate(preds, gts, cfg)
    print(f"ODS {report.ods_f:.4f}  OIS {report.ois_f:.4f}  AP {report.ap:.4f}")
    if args.out:
        report.save_json(args.out)
        print(f"report: {args.out}")
    if args.pr_csv:
        report.save_pr_csv(args.pr_csv)
        print(f"pr curve: {args.pr_csv}")
    return 0


def _cmd_build_labels(args) -> int:
    manifest = load_manifest(args.manifest)
    samples = load_samples(manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    for sample in samples:
        rng = stable_rng(args.seed, 0, sample.sample_id, "consensus")
        ladder = make_ladder(sample.annotations, args.zeta, rng)
        base = os.path.join(args.out_dir, sample.sample_id)
        save_mask_png(base + "_coarse.png", ladder.coarse)
        save_mask_png(base + "_medium.png", ladder.medium)
        save_mask_png(base + "_fine.png", ladder.fine)
        save_mask_png(base + "_consensus.png", ladder.consensus)
        save_image_png(base + "_soft.png", ladder.soft_consensus)
    print(f"wrote ladder maps for {len(samples)} images to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgedge")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train_args(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.add_argument("--resume", default=None)
        p.add_argument("--log-every", type=int, default=0)

    p_train = sub.add_parser("train", help="train the side transfer network")
    add_train_args(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_ablate = sub.add_parser("ablate", help="train with components disabled")
    add_train_args(p_ablate)
    p_ablate.add_argument("--soc-off", action="store_true")
    p_ablate.add_argument("--guide-off", action="store_true")
    p_ablate.add_argument("--differ-off", action="store_true")
    p_ablate.set_defaults(func=_cmd_ablate)

    p_infer = sub.add_parser("infer", help="run the detector on one image")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--image", required=True)
    p_infer.add_argument("--out-dir", required=True)
    p_infer.add_argument("--alpha", type=float, default=None)
    p_infer.add_argument("--candidates", type=int, default=None)
    p_infer.set_defaults(func=_cmd_infer)

    p_eval = sub.add_parser("evaluate", help="boundary benchmark on saved maps")
    p_eval.add_argument("--pred-dir", required=True)
    p_eval.add_argument("--gt-dir", required=True)
    p_eval.add_argument("--tolerance", type=float, default=0.0075)
    p_eval.add_argument("--thresholds", type=int, default=99)
    p_eval.add_argument("--no-nms", action="store_true")
    p_eval.add_argument("--candidates", type=int, default=None)
    p_eval.add_argument("--out", default=None, help="write the report as JSON")
    p_eval.add_argument("--pr-csv", default=None, help="write the PR curve as CSV")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_labels = sub.add_parser("build-labels", help="emit ladder PNGs for inspection")
    p_labels.add_argument("--manifest", required=True)
    p_labels.add_argument("--out-dir", required=True)
    p_labels.add_argument("--zeta", type=float, default=0.2)
    p_labels.add_argument("--seed", type=int, default=0)
    p_labels.set_defaults(func=_cmd_build_labels)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MgedgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
