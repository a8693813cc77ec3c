"""Command-line entry point: ``implicit-depth <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import evaluate_depth, evaluate_occlusion, evaluate_temporal, report_from
from .geometry import PlaneSpec, render_plane_depth
from .inference import (BinarySearchConfig, ThresholdTable, binary_search_depth, blended_mask, composite,
                        predict_mask, select_thresholds)
from .io import write_depth, write_mask, write_rgb
from .metrics import format_table
from .nn import ImplicitModel, RegressionModel, load_checkpoint
from .synth import SceneConfig, generate_dataset, load_dataset, load_sequence, save_sequence
from .training import TrainConfig, train_implicit, train_regression, write_history_csv

log = logging.getLogger("implicit_depth")


def parse_range(text: str) -> list[float]:
    """``min:max:step`` (inclusive) or a comma-separated list."""
    if ":" not in text:
        return [float(x) for x in text.split(",") if x]
    parts = [float(x) for x in text.split(":")]
    if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
        raise argparse.ArgumentTypeError(f"bad range {text!r}; expected min:max:step")
    lo, hi, step = parts
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 6) for i in range(n + 1)]


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default, sort_keys=True) + "\n")


def _write_run(out: Path, args, extra=None) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    if extra:
        resolved.update(extra)
    _write_json(out / "run.json", {"version": __version__, "command": args.command, "seed": args.seed,
                                   "config": resolved})


def _train_config(args) -> TrainConfig:
    base = TrainConfig.from_json(args.config).to_dict() if args.config else {}
    for key in ("steps", "lr", "lambda_reg", "q", "p1", "p2", "images_per_step", "samples_per_image",
                "feature_channels", "warm_start"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    if getattr(args, "no_temporal", False):
        base["temporal"] = False
    base["seed"] = args.seed
    return TrainConfig.from_dict(base)


def cmd_synth(args) -> int:
    config = SceneConfig(width=args.width, height=args.height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, seq in enumerate(generate_dataset(args.seed, args.scenes, args.frames, config)):
        save_sequence(seq, out / f"scene_{i:03d}")
    _write_run(out, args, {"scene_config": vars(config)})
    print(f"wrote {args.scenes} sequences of {args.frames} frames to {out}")
    return 0


def _train(args, regression: bool) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _train_config(args)
    config.checkpoint = str(out / "model.ckpt")
    dataset = load_dataset(args.data)
    result = (train_regression if regression else train_implicit)(dataset, config)
    write_history_csv(result.history, out / "loss.csv")
    _write_run(out, args, {"train_config": config.to_dict()})
    print(f"trained for {config.steps} steps; final loss {result.history[-1]['total']:.4f}; "
          f"checkpoint {config.checkpoint}")
    return 0


def cmd_train(args) -> int:
    return _train(args, regression=False)


def cmd_train_baseline(args) -> int:
    return _train(args, regression=True)


def _thresholds(args, model):
    if getattr(args, "thresholds", None):
        return ThresholdTable.from_dict(json.loads(Path(args.thresholds).read_text()))
    if getattr(args, "val", None) and isinstance(model, ImplicitModel):
        return select_thresholds(model, load_dataset(args.val), args.planes)
    return 0.5


def cmd_eval_occlusion(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.model)
    tau = _thresholds(args, model)
    result = evaluate_occlusion(model, load_dataset(args.data), args.planes, tau, args.frame_stride)
    if isinstance(tau, ThresholdTable):
        result["thresholds"] = tau.to_dict()
        _write_json(out / "thresholds.json", tau.to_dict())
    _write_json(out / "occlusion.json", result)
    table = format_table({Path(args.model).stem: report_from(occlusion=result)})
    (out / "occlusion.txt").write_text(table + "\n")
    _write_run(out, args)
    print(table)
    return 0


def cmd_eval_depth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.model)
    config = BinarySearchConfig(args.steps, args.d_min, args.d_max, args.spacing)
    tau = _thresholds(args, model)
    result = evaluate_depth(model, load_dataset(args.data), config, tau, args.frame_stride)
    _write_json(out / "depth.json", result)
    table = format_table({Path(args.model).stem: report_from(depth=result)})
    (out / "depth.txt").write_text(table + "\n")
    _write_run(out, args)
    print(table)
    return 0


def cmd_eval_temporal(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.model)
    if not isinstance(model, ImplicitModel):
        raise ValueError("temporal evaluation needs an implicit model checkpoint")
    tau = _thresholds(args, model)
    result = evaluate_temporal(model, load_dataset(args.data), args.sub_length, args.warmup, tau,
                               use_temporal=not args.no_temporal)
    _write_json(out / "temporal.json", result)
    _write_run(out, args)
    print(json.dumps(result, indent=2))
    return 0


def virtual_plane_rgb(shape, checker: int = 8) -> np.ndarray:
    """A magenta/cyan checkerboard standing in for rendered virtual content."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    on = ((yy // checker) + (xx // checker)) % 2 == 0
    return np.where(on[..., None], [0.9, 0.2, 0.8], [0.2, 0.8, 0.9])


def cmd_composite(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.model)
    seq = load_sequence(args.data)
    frames = seq.frames if args.frame is None else [seq.frames[args.frame]]
    prev = None
    for i, frame in enumerate(frames):
        dv = render_plane_depth(PlaneSpec(args.plane), frame.pose, seq.intrinsics)
        if isinstance(model, RegressionModel):
            from .geometry import DepthMap
            mask = blended_mask(DepthMap(model.predict_depth(frame.rgb)), dv, args.band)
        else:
            mask = predict_mask(model, frame.rgb, dv, prev, frame.pose, frames[i - 1].pose if i else None,
                                seq.intrinsics)
            prev = mask
        final = composite(frame.rgb, virtual_plane_rgb(dv.shape), mask)
        write_mask(out / f"mask_{frame.timestamp:05d}.png", mask.values, mask.coverage)
        write_rgb(out / f"composite_{frame.timestamp:05d}.png", final)
    _write_run(out, args)
    print(f"wrote {len(frames)} masks and composites to {out}")
    return 0


def cmd_extract_depth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.model)
    config = BinarySearchConfig(args.steps, args.d_min, args.d_max, args.spacing)
    tau = _thresholds(args, model)
    seq = load_sequence(args.data)
    for frame in seq.frames:
        if isinstance(model, RegressionModel):
            from .geometry import DepthMap
            depth = DepthMap(model.predict_depth(frame.rgb))
        else:
            depth = binary_search_depth(model, frame.rgb, config, tau)
        write_depth(out / f"depth_{frame.timestamp:05d}.bin", depth)
    _write_run(out, args)
    print(f"wrote {len(seq.frames)} depth maps to {out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all
    ok = run_all(verbose=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_run(out, args, {"passed": ok})
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="implicit-depth", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate procedural sequences")
    sp.add_argument("--scenes", type=int, default=4)
    sp.add_argument("--frames", type=int, default=40)
    sp.add_argument("--width", type=int, default=96)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--out", required=True)

    for name, func, help_ in (("train", cmd_train, "train the implicit occlusion model"),
                              ("train-baseline", cmd_train_baseline, "train the depth regression baseline")):
        sp = add(name, func, help_)
        sp.add_argument("--data", required=True)
        sp.add_argument("--config", help="training config JSON")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--lambda-reg", dest="lambda_reg", type=float)
        sp.add_argument("--q", type=float)
        sp.add_argument("--p1", type=float)
        sp.add_argument("--p2", type=float)
        sp.add_argument("--images-per-step", dest="images_per_step", type=int)
        sp.add_argument("--samples-per-image", dest="samples_per_image", type=int)
        sp.add_argument("--feature-channels", dest="feature_channels", type=int)
        sp.add_argument("--warm-start", dest="warm_start")
        sp.add_argument("--no-temporal", action="store_true", help="train without the previous-mask input")
        sp.add_argument("--out", required=True)

    def add_eval_common(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--thresholds", help="threshold table JSON")
        sp.add_argument("--val", help="validation data used to pick thresholds")
        sp.add_argument("--planes", type=parse_range, default=parse_range("0.5:5.0:0.5"))
        sp.add_argument("--frame-stride", dest="frame_stride", type=int, default=1)
        sp.add_argument("--out", required=True)

    def add_search(sp):
        sp.add_argument("--steps", type=int, default=12)
        sp.add_argument("--d-min", dest="d_min", type=float, default=0.5)
        sp.add_argument("--d-max", dest="d_max", type=float, default=8.0)
        sp.add_argument("--spacing", choices=("linear", "inverse"), default="linear")

    add_eval_common(add("eval-occlusion", cmd_eval_occlusion, "plane occlusion IoU"))
    sp = add("eval-depth", cmd_eval_depth, "depth metrics via binary search")
    add_eval_common(sp)
    add_search(sp)
    sp = add("eval-temporal", cmd_eval_temporal, "temporal flicker score")
    add_eval_common(sp)
    sp.add_argument("--sub-length", dest="sub_length", type=int, default=15)
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--no-temporal", action="store_true", help="roll out without previous masks")

    sp = add("composite", cmd_composite, "write masks and composites for a virtual plane")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="one sequence directory")
    sp.add_argument("--plane", type=float, default=2.0)
    sp.add_argument("--frame", type=int)
    sp.add_argument("--band", type=float, default=0.2, help="blend band for regression models (m)")
    sp.add_argument("--out", required=True)

    sp = add("extract-depth", cmd_extract_depth, "binary-search depth maps")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="one sequence directory")
    sp.add_argument("--thresholds")
    add_search(sp)
    sp.add_argument("--out", required=True)

    sp = add("selftest", cmd_selftest, "gradient checks and metric brute-force suite")
    sp.add_argument("--out")
    return p


def _thread_limit():
    n = os.environ.get("IMPD_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"implicit-depth {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
