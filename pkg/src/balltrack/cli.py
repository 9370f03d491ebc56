"""Command-line operator surface.

Subcommands: synth (dataset generation), train, eval (model or injected
counts), infer (heatmap + overlay export), gradcheck (finite-difference
suite), stats (parameter and MAC counts).  Every command takes --config
FILE and repeatable --set key=value overrides; flags beat file values,
which beat defaults.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import gradcheck as gc
from . import reporting
from .config import ConfigError, RunConfig
from .evalkit import (ConfusionCounts, evaluate_model, extract_coordinate,
                      format_report, frame_heatmaps_for_sequence, report_rows,
                      write_report_csv)
from .pipeline import ModelConfig, PipelineVariant, TrackModel
from .synthgen import make_dataset, read_dataset, write_dataset
from .trainkit import (WindowSet, fit, load_checkpoint, load_into_model,
                       save_checkpoint, write_loss_log)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="plain-text config file with dotted keys")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--seed", type=int, default=None, help="global seed")


def _resolve(args, extra: dict | None = None) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key, value in (extra or {}).items():
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    return RunConfig.resolve(args.config, overrides)


def _model_from_checkpoint(prefix: Path) -> tuple[TrackModel, RunConfig]:
    arrays, stored, _ = load_checkpoint(prefix)
    cfg = RunConfig.resolve(None, stored)
    model = TrackModel(cfg.model())
    load_into_model(model, prefix)
    return model, cfg


def cmd_synth(args) -> int:
    cfg = _resolve(args, {
        "synth.sequences": args.sequences,
        "scene.frames": args.frames,
    })
    data = make_dataset(cfg["synth.sequences"], cfg.scene())
    manifest = write_dataset(data, args.out)
    total = sum(s["frames"] for s in manifest["sequences"])
    print(f"wrote {len(manifest['sequences'])} sequences, {total} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, {"variant": args.variant, "train.epochs": args.epochs})
    try:
        data = read_dataset(args.data)
    except FileNotFoundError as exc:
        return _fail(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = TrackModel(cfg.model())
    windows = WindowSet.from_sequences(data, radius=cfg["gt.radius"])
    result = fit(model, windows, cfg.train())
    write_loss_log(result.loss_log, out / "loss_log.csv")
    reporting.save_loss_curve(result.loss_log, out / "loss_curve.png")
    save_checkpoint(result.state, out / "checkpoint", config=cfg.as_flat_strings())
    if result.aborted:
        return _fail("training diverged; last good checkpoint written")
    final = result.loss_log[-1][3] if result.loss_log else float("nan")
    print(f"trained {cfg['variant']} for {cfg['train.epochs']} epochs, "
          f"final loss {final:.6f}; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.counts is not None:
        parts = [p for p in args.counts.replace(",", " ").split() if p]
        if len(parts) != 5:
            return _fail(f"--counts expects TP,FP1,FP2,TN,FN, got {args.counts!r}")
        tp, fp1, fp2, tn, fn = (int(p) for p in parts)
        counts = ConfusionCounts(tp, fp1, fp2, tn, fn)
        label = args.label or "fixture"
    else:
        if args.checkpoint is None or args.data is None:
            return _fail("eval needs either --counts or both --data and --checkpoint")
        try:
            model, mcfg = _model_from_checkpoint(args.checkpoint)
        except (FileNotFoundError, ValueError) as exc:
            return _fail(str(exc))
        try:
            data = read_dataset(args.data)
        except FileNotFoundError as exc:
            return _fail(str(exc))
        counts, _ = evaluate_model(model, data, cfg.eval())
        label = args.label or mcfg["variant"]
    rows = report_rows([(label, counts)])
    text = format_report(rows)
    print(text)
    (out / "report.txt").write_text(text + "\n")
    write_report_csv(rows, out / "report.csv")
    reporting.save_metrics_figure(rows, out / "metrics.png")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve(args)
    try:
        model, _ = _model_from_checkpoint(args.checkpoint)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))
    try:
        data = read_dataset(args.data)
    except FileNotFoundError as exc:
        return _fail(str(exc))
    if args.sequence is not None:
        if args.sequence not in data:
            return _fail(f"sequence {args.sequence!r} not in dataset "
                         f"(available: {', '.join(sorted(data))})")
        data = {args.sequence: data[args.sequence]}
    out = Path(args.out)
    ecfg = cfg.eval()
    written = 0
    for name, frames_list in sorted(data.items()):
        seq_dir = out / name
        seq_dir.mkdir(parents=True, exist_ok=True)
        frames = np.stack([f.image for f in frames_list])
        maps = frame_heatmaps_for_sequence(model, frames)
        for k, fr in enumerate(frames_list):
            det = extract_coordinate(maps[k], ecfg, frame=k)
            pred = (det.x, det.y) if det.present else None
            gt = (fr.x, fr.y) if fr.visible else None
            reporting.save_heatmap(seq_dir / f"heatmap_{k:06d}.png", maps[k])
            reporting.save_image(seq_dir / f"overlay_{k:06d}.png",
                                 reporting.overlay_frame(fr.image, pred, gt))
            written += 1
    print(f"wrote heatmaps and overlays for {written} frames to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, {"gradcheck.tolerance": args.tolerance})
    tolerance = cfg["gradcheck.tolerance"]
    seeds = gc.DEFAULT_SEEDS[:cfg["gradcheck.seeds"]]
    results, ok = gc.run_suite(tolerance, seeds)
    width = max(len(name) for name, _ in results)
    for name, err in results:
        status = "ok" if err < tolerance else "FAIL"
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {status}")
    print(f"{'PASS' if ok else 'FAIL'}: {len(results)} checks at tolerance {tolerance:g}")
    return 0 if ok else 1


def cmd_stats(args) -> int:
    cfg = _resolve(args, {"variant": args.variant})
    model = TrackModel(cfg.model())
    shape = (1, 3, cfg["scene.height"], cfg["scene.width"])
    params = dc.count_params(model)
    macs = dc.estimate_flops(model, shape)
    print(f"variant:      {cfg['variant']}")
    print(f"input:        3 frames at {cfg['scene.width']}x{cfg['scene.height']}")
    print(f"parameters:   {params}")
    print(f"mac count:    {macs}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balltrack",
        description="Small fast-object tracking: synthetic data, training, "
                    "evaluation, inference, and model verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sequences", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a pipeline variant on a dataset")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", choices=[v.value for v in PipelineVariant], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the evaluation protocol or score injected counts")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--counts", type=str, default=None,
                   help="fixture mode: TP,FP1,FP2,TN,FN")
    p.add_argument("--label", type=str, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="export heatmaps and prediction overlays")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sequence", type=str, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="parameter count and MAC estimate")
    _add_common(p)
    p.add_argument("--variant", choices=[v.value for v in PipelineVariant], default=None)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
