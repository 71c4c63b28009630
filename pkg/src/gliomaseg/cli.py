"""Command-line entry point: ``gliomaseg {gen-phantom,train,evaluate,explain}``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import (
    BatchGenerator,
    case_samples,
    discover_cases,
    generate_phantom,
    normalize,
    resize_image,
    split_dataset,
    write_nifti,
)
from .data.phantom import MIN_XY
from .explain import GradCamConfig, target_classes, write_explanation
from .model import WeightsError, build_model, load_weights, save_weights
from .training import DivergedTrainingError, evaluate, train, write_history_csv

log = logging.getLogger("gliomaseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Validation failure reported with exit code 2."""


def _parse_ints(text: str, n: int, what: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{what} must be {n} comma-separated integers, got {text!r}") from None
    if len(values) != n:
        raise UsageError(f"{what} must be {n} comma-separated integers, got {text!r}")
    return values


def _ensure_writable_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")


def cmd_gen_phantom(args) -> int:
    dims = _parse_ints(args.dims, 3, "--dims")
    if dims[0] < MIN_XY or dims[1] < MIN_XY or dims[2] < 1:
        raise UsageError(f"--dims X,Y must be >= {MIN_XY} and Z >= 1, got {args.dims}")
    if args.window:
        window = _parse_ints(args.window, 2, "--window")
    elif dims[2] >= 122:
        window = (22, 100)
    else:
        window = (dims[2] // 4, max(1, dims[2] // 2))
    if window[0] < 0 or window[1] < 1 or sum(window) > dims[2]:
        raise UsageError(f"--window {window} does not fit Z={dims[2]}")
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    out = Path(args.out)
    _ensure_writable_dir(out)
    for case in generate_phantom(args.seed, args.cases, dims, window):
        case_dir = out / case.case_id
        case_dir.mkdir(exist_ok=True)
        write_nifti(case_dir / "flair.nii", case.volume("flair").voxels, "float32")
        write_nifti(case_dir / "t1ce.nii", case.volume("t1ce").voxels, "float32")
        write_nifti(case_dir / "seg.nii", case.volume("seg").voxels, "uint8")
        print(f"{case.case_id}\t{case_dir}\tdims={dims[0]}x{dims[1]}x{dims[2]}\twindow={window[0]}+{window[1]}")
    return EXIT_OK


def _load_run_config(path) -> cfgmod.RunConfig:
    try:
        return cfgmod.load_config(path)
    except cfgmod.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _cases_and_split(cfg: cfgmod.RunConfig):
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise UsageError(f"data root {root} does not exist")
    cases = discover_cases(root)
    if not cases:
        raise UsageError(f"no cases with flair/t1ce/seg volumes found under {root}")
    try:
        split = split_dataset(sorted(cases), cfg.data.exclusions, cfg.data.split_ratios, cfg.data.split_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cases, split


def _samples(cfg: cfgmod.RunConfig, cases, ids):
    d = cfg.data
    out = []
    for case_id in ids:
        out.extend(case_samples(cases[case_id], d.slice_start, d.slice_count, d.modalities, d.image_size))
    return out


def _check_window(cfg: cfgmod.RunConfig, cases, ids) -> None:
    d = cfg.data
    for case_id in ids:
        z = cases[case_id].volume("seg").dims[2]
        if d.slice_start + d.slice_count > z:
            raise UsageError(f"case {case_id}: slice window {d.slice_start}+{d.slice_count} exceeds Z={z}")


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    cases, split = _cases_and_split(cfg)
    if not split.train or not split.validation:
        raise UsageError(f"split leaves train={len(split.train)} validation={len(split.validation)} cases; need both > 0")
    _check_window(cfg, cases, split.train + split.validation)
    out = Path(cfg.output_dir)
    _ensure_writable_dir(out)

    train_gen = BatchGenerator(_samples(cfg, cases, split.train), cfg.train.batch_size, shuffle=True, seed=cfg.train.seed)
    val_gen = BatchGenerator(_samples(cfg, cases, split.validation), cfg.train.batch_size, shuffle=False)
    cfgmod.dump_config(cfg, out / "config.resolved.json")
    model = build_model(cfg.model)
    log.info("training on %d slices, validating on %d", len(train_gen), len(val_gen))

    def report(row):
        print(f"epoch {row.epoch:4d}  train_loss {row.train_loss:.6f}  val_loss {row.val_loss:.6f}  "
              f"train_dice {row.train_dice:.6f}  val_dice {row.val_dice:.6f}  lr {row.lr:.3g}", flush=True)

    try:
        model, history = train(model, train_gen, val_gen, cfg.train, checkpoint_path=out / "best.weights", on_epoch=report)
    except DivergedTrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_history_csv(history, out / "history.csv")
    save_weights(model, out / "final.weights")
    return EXIT_OK


def _load_model(cfg: cfgmod.RunConfig, weights: str):
    if not Path(weights).is_file():
        raise UsageError(f"weights file {weights} does not exist")
    try:
        return load_weights(weights, expected=cfg.model)
    except WeightsError as exc:
        raise UsageError(f"cannot use weights {weights}: {exc}") from None


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args.config)
    cases, split = _cases_and_split(cfg)
    ids = split.ids(args.split)
    if not ids:
        raise UsageError(f"split {args.split!r} is empty")
    _check_window(cfg, cases, ids)
    model = _load_model(cfg, args.weights)
    gen = BatchGenerator(_samples(cfg, cases, ids), cfg.train.batch_size, shuffle=False)
    report = evaluate(model, gen)
    print(f"split {args.split}: {len(ids)} cases, {len(gen)} slices")
    print(report.format())
    print(json.dumps(report.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = _load_run_config(args.config)
    cases, _ = _cases_and_split(cfg)
    if args.case not in cases:
        raise UsageError(f"case {args.case!r} not found under {cfg.data.root}")
    case = cases[args.case]
    z_dim = case.volume("seg").dims[2]
    if not 0 <= args.slice < z_dim:
        raise UsageError(f"--slice {args.slice} out of range 0..{z_dim - 1}")
    target = cfg.gradcam.target if args.target_class is None else args.target_class
    try:
        gc = GradCamConfig(target=target, masked=cfg.gradcam.masked, sigma=cfg.gradcam.sigma,
                           alpha=cfg.gradcam.alpha, score_scale=cfg.gradcam.score_scale)
        target_classes(gc.target, cfg.model.num_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = _load_model(cfg, args.weights)
    size = cfg.data.image_size
    image = np.stack([
        resize_image(normalize(case.volume(m).voxels)[:, :, args.slice], (size, size)) for m in cfg.data.modalities
    ]).astype(np.float32)
    out = Path(args.out)
    _ensure_writable_dir(out)
    meta = write_explanation(model, np.clip(image, 0.0, 1.0), out, gc,
                             extra_metadata={"case": args.case, "slice": args.slice}, size=128)
    print(json.dumps(meta, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gliomaseg", description="Attention U-Net brain tumour segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log diagnostics to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write synthetic phantom cases as NIfTI files")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="64,64,8", help="X,Y,Z")
    p.add_argument("--window", default=None, help="START,COUNT slices that must contain the lesion")
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="report metrics for a split")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="Grad-CAM explanation for one slice")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--slice", type=int, required=True)
    p.add_argument("--class", dest="target_class", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surface as runtime failure with a message
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
