"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad flags or inputs), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="feds", description="Learned image codec toolkit")
    sub = parser.add_subparsers(dest="verb", metavar="verb")

    def common(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--scale", type=float, default=1.0,
                       help="toy-scale factor applied to iteration schedules")
        p.add_argument("--lambda-index", type=int, default=3,
                       help="index into the rate-point presets")
        p.add_argument("--out", required=True)

    p = sub.add_parser("train-teacher", help="stage 1: train the teacher codec")
    common(p)
    p.add_argument("--data", help="training image directory")
    p.add_argument("--log", help="JSON-lines training log path")

    p = sub.add_parser("distill", help="stage 2: train the student against the teacher")
    common(p)
    p.add_argument("--teacher-ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--log")

    p = sub.add_parser("finetune", help="stage 3: fine-tune the student alone")
    common(p)
    p.add_argument("--student-ckpt", required=True,
                   help="stage-2 checkpoint to fine-tune")
    p.add_argument("--data")
    p.add_argument("--log")

    p = sub.add_parser("compress", help="encode an image to a .feds file")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decompress", help="decode a .feds file to an image")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="RD-evaluate a model over an image directory")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true",
                   help="print the aggregate metrics as JSON on stdout")
    p.add_argument("--no-msssim", action="store_true",
                   help="skip MS-SSIM (for images below its minimum size)")

    p = sub.add_parser("entropy-map", help="export per-channel entropy heatmaps")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ranks", default="1,40,80,120,160",
                   help="comma-separated 1-based entropy ranks")

    p = sub.add_parser("bdrate", help="BD-rate between two RD-curve CSVs")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--quality", choices=("psnr", "msssim_db"), default="psnr")
    p.add_argument("--json", action="store_true")

    return parser


def _load_config(path: str | None) -> dict:
    from .training import parse_config_file

    return parse_config_file(path) if path else {}


def _resolve_seed(args, cfg: dict) -> int:
    from .training import resolve_seed

    if args.seed is not None:
        return args.seed
    config_seed = int(cfg["train.seed"]) if "train.seed" in cfg else None
    return resolve_seed(config_seed)


def _dataset(args, cfg: dict, seed: int):
    from .training import DatasetSpec, dataset_spec_from_dir, prepare_dataset

    data_dir = args.data or cfg.get("data.train_dir")
    if not data_dir:
        raise UsageError("no training data: pass --data or set data.train_dir")
    crop = int(cfg.get("data.crop_size", DatasetSpec.crop_size))
    rescale_raw = cfg.get("data.rescale_target", "none")
    rescale = None if rescale_raw.lower() in ("none", "") else int(rescale_raw)
    aug_raw = cfg.get("data.augmentations")
    kwargs = dict(crop_size=crop, rescale_target=rescale)
    if aug_raw is not None:
        kwargs["augmentations"] = frozenset(a for a in aug_raw.split(",") if a)
    spec = dataset_spec_from_dir(data_dir, **kwargs)
    from .training import derive_seed

    return prepare_dataset(spec, derive_seed(seed, "data"))


def _feds_weights(args, cfg: dict):
    from .distillation import FEDSWeights

    kwargs = {}
    for key in ("alpha", "beta", "gamma"):
        if f"feds.{key}" in cfg:
            kwargs[key] = float(cfg[f"feds.{key}"])
    if "feds.distortion" in cfg:
        kwargs["distortion"] = cfg["feds.distortion"]
    return FEDSWeights.from_lambda_index(args.lambda_index, **kwargs)


def _optimizer_spec(cfg: dict):
    from .training import OptimizerSpec

    kwargs = {}
    if "train.batch_size" in cfg:
        kwargs["batch_size"] = int(cfg["train.batch_size"])
    if "train.clip_norm" in cfg:
        kwargs["clip_norm"] = float(cfg["train.clip_norm"])
    return OptimizerSpec(**kwargs)


def _cmd_train_teacher(args) -> int:
    from .distillation import STAGE_TEACHER, stage_plan
    from .training import build_model, checkpoint_save, network_config_from_dict, run_stage

    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    w = _feds_weights(args, cfg)
    net_cfg = network_config_from_dict(cfg, "teacher")
    model = build_model(net_cfg, lam=w.lam, lambda_index=args.lambda_index, seed=seed)
    data = _dataset(args, cfg, seed)
    ckpt = run_stage(stage_plan(STAGE_TEACHER), model, data, _optimizer_spec(cfg), w,
                     scale=args.scale, seed=seed, log_path=args.log,
                     checkpoint_path=args.out)
    checkpoint_save(ckpt, args.out)
    print(f"teacher checkpoint written to {args.out}")
    return 0


def _cmd_distill(args) -> int:
    from .distillation import STAGE_DISTILL, STAGE_TEACHER, stage_plan
    from .training import (build_model, checkpoint_load, checkpoint_save,
                           network_config_from_dict, run_stage)

    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    w = _feds_weights(args, cfg)
    teacher_ckpt = checkpoint_load(args.teacher_ckpt)
    if teacher_ckpt.stage != STAGE_TEACHER:
        raise UsageError(f"--teacher-ckpt must be a stage-1 checkpoint, "
                         f"got stage {teacher_ckpt.stage!r}")
    teacher = teacher_ckpt.build_model()
    net_cfg = network_config_from_dict(cfg, "student")
    model = build_model(net_cfg, lam=w.lam, lambda_index=args.lambda_index, seed=seed)
    data = _dataset(args, cfg, seed)
    ckpt = run_stage(stage_plan(STAGE_DISTILL), model, data, _optimizer_spec(cfg), w,
                     teacher=teacher, scale=args.scale, seed=seed, log_path=args.log,
                     checkpoint_path=args.out)
    checkpoint_save(ckpt, args.out)
    print(f"distilled student checkpoint written to {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    from .distillation import STAGE_FINETUNE, stage_plan
    from .training import checkpoint_load, checkpoint_save, run_stage

    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    w = _feds_weights(args, cfg)
    student_ckpt = checkpoint_load(args.student_ckpt)
    model = student_ckpt.build_model()
    data = _dataset(args, cfg, seed)
    ckpt = run_stage(stage_plan(STAGE_FINETUNE), model, data, _optimizer_spec(cfg), w,
                     scale=args.scale, seed=seed, init_from=student_ckpt,
                     log_path=args.log, checkpoint_path=args.out)
    checkpoint_save(ckpt, args.out)
    print(f"fine-tuned student checkpoint written to {args.out}")
    return 0


def _cmd_compress(args) -> int:
    from .bitstream import compress_image
    from .metrics import psnr
    from .networks import ImageBuffer, load_rgb, pad_image
    from .training import checkpoint_load

    model = checkpoint_load(args.model).build_model()
    buf = pad_image(load_rgb(args.input))
    container, state = compress_image(buf, model, return_state=True)
    Path(args.out).write_bytes(container.to_bytes())
    original = ImageBuffer(pixels=buf.pixels[:buf.original_height, :buf.original_width],
                           original_height=buf.original_height,
                           original_width=buf.original_width)
    print(f"bpp={container.bpp:.4f} psnr_db={psnr(original, state.reconstruction):.2f}")
    return 0


def _cmd_decompress(args) -> int:
    from .bitstream import BitstreamContainer, decompress_image
    from .networks import save_rgb
    from .training import checkpoint_load

    model = checkpoint_load(args.model).build_model()
    container = BitstreamContainer.from_bytes(Path(args.input).read_bytes(),
                                              model.charm.num_slices)
    recon = decompress_image(container, model)
    save_rgb(args.out, recon)
    print(f"bpp={container.bpp:.4f} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import emit_reports, evaluate_model
    from .training import checkpoint_load

    model = checkpoint_load(args.model).build_model()
    evals, aggregate = evaluate_model(model, args.data,
                                      compute_msssim=not args.no_msssim)
    emit_reports(args.out, evals, aggregate)
    if args.json:
        print(json.dumps(aggregate, sort_keys=True))
    else:
        print(f"{aggregate['images']} images: bpp={aggregate['bpp']:.4f} "
              f"psnr_db={aggregate['psnr_db']:.2f}")
    return 0


def _cmd_entropy_map(args) -> int:
    from .metrics import emit_heatmaps, entropy_heatmaps, rankings_to_csv
    from .networks import load_rgb, pad_image
    from .training import checkpoint_load

    model = checkpoint_load(args.model).build_model()
    try:
        ranks = tuple(int(r) for r in args.ranks.split(","))
    except ValueError:
        raise UsageError(f"bad --ranks value {args.ranks!r}")
    buf = pad_image(load_rgb(args.input))
    entries, ranking = entropy_heatmaps(model, buf, ranks=ranks,
                                        image_name=Path(args.input).name)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_heatmaps(out_dir, entries)
    rankings_to_csv(out_dir / "channel_ranking.csv", ranking)
    print(f"wrote {len(entries)} heatmaps to {out_dir}")
    return 0


def _cmd_bdrate(args) -> int:
    from .metrics import bd_rate, curve_from_csv

    anchor = curve_from_csv(args.anchor)
    test = curve_from_csv(args.test)
    result = bd_rate(anchor, test, quality=args.quality)
    if args.json:
        print(json.dumps({"bd_rate_percent": result.percent,
                          "overlap": list(result.overlap),
                          "quality": args.quality}, sort_keys=True))
    else:
        print(f"{result.percent:+.3f}%")
    return 0


_COMMANDS = {
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "finetune": _cmd_finetune,
    "compress": _cmd_compress,
    "decompress": _cmd_decompress,
    "eval": _cmd_eval,
    "entropy-map": _cmd_entropy_map,
    "bdrate": _cmd_bdrate,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
