"""Command-line surface: synthesize, preprocess, train, evaluate, inspect.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure
(e.g. a failed gradient check). Every run writes a JSON run manifest next to
its outputs with the configuration, seed, wall time and artifact checksums.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import datapipe, pgm, training
from .archive import FormatError
from .blocks import AsppConfig
from .datapipe import DataError, SynthConfig
from .layers import (
    Activation,
    Conv3D,
    ConvSpec,
    ImageLevelPool,
    MaxPoolSpatial,
    UpsampleNearestSpatial,
)
from .model import (
    Model,
    ModelConfig,
    build_broad_unet,
    build_plain_unet,
    dump_feature_maps,
    mini_config,
    persistence_predict,
)
from .tensor import ShapeError

EVAL_COLUMNS = "horizon_minutes,mse,mse_binarized,accuracy,precision,recall"


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_run_manifest(directory, command, args, outputs, wall_time,
                        extra=None):
    manifest = {
        "command": command,
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "outputs": [str(p) for p in outputs],
        "wall_time_s": wall_time,
        "artifact_checksums": {str(p): _sha256(p) for p in outputs
                               if os.path.isfile(p)},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, "run-manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return path


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        lags=args.t, height=args.hw, width=args.hw, features=args.f,
        base_filters=args.f0, factorized=args.factorized, head=args.head)


def _build(arch: str, cfg: ModelConfig) -> Model:
    if arch == "broad-unet":
        return build_broad_unet(cfg)
    if arch == "unet":
        return build_plain_unet(cfg)
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    t0 = time.monotonic()
    vy, vx = (float(v) for v in args.velocity.split(","))
    seq = datapipe.synth_advection(SynthConfig(
        height=args.h, width=args.w, n_frames=args.frames,
        n_blobs=args.blobs, velocity=(vy, vx), blob_sigma=args.sigma,
        seed=args.seed))
    datapipe.save_frames(args.out, seq)
    _write_run_manifest(os.path.dirname(args.out) or ".", "synth-gen", args,
                        [args.out], time.monotonic() - t0)
    print(f"wrote {len(seq)} frames of {args.h}x{args.w} to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    t0 = time.monotonic()
    seq = datapipe.load_frames(args.frames)
    if args.task == "precip":
        out = datapipe.precip_preprocess(seq, args.rain_fraction,
                                         args.train_fraction)
    else:
        records = datapipe.archive_load(args.frames)
        if "lats" not in records or "lons" not in records:
            raise DataError("cloud preprocessing needs 'lats'/'lons' records")
        out = datapipe.cloud_preprocess(seq, records["lats"], records["lons"])
    datapipe.save_frames(args.out, out)
    _write_run_manifest(os.path.dirname(args.out) or ".", "preprocess", args,
                        [args.out], time.monotonic() - t0,
                        extra={"metadata": out.metadata})
    print(f"kept {len(out)} frames -> {args.out}")
    return 0


def cmd_make_samples(args) -> int:
    t0 = time.monotonic()
    seq = datapipe.load_frames(args.frames)
    samples = datapipe.make_samples(seq, args.lags, args.horizon)
    datapipe.save_samples(args.out, samples)
    _write_run_manifest(os.path.dirname(args.out) or ".", "make-samples",
                        args, [args.out], time.monotonic() - t0)
    print(f"{len(samples)} samples (lags={args.lags}, horizon={args.horizon}) "
          f"-> {args.out}")
    return 0


def _load_or_synth_samples(args):
    if args.samples:
        return datapipe.load_samples(args.samples)
    if args.task != "synth":
        raise ValueError("--samples is required unless --task synth")
    total = args.train_n + args.val_n + args.test_n
    frames = total + args.lags + args.horizon - 1
    seq = datapipe.synth_advection(SynthConfig(
        height=args.hw, width=args.hw, n_frames=frames, seed=args.seed))
    return datapipe.make_samples(seq, args.lags, args.horizon)


def cmd_train(args) -> int:
    t0 = time.monotonic()
    os.makedirs(args.out_dir, exist_ok=True)
    samples = _load_or_synth_samples(args)
    train_set, val_set, test_set = datapipe.split_counts(
        samples, args.train_n, args.val_n, args.test_n)
    _, lags, h, w, f = train_set.inputs.shape
    head = "binary" if args.loss == "bce" else "regression"
    cfg = ModelConfig(lags=lags, height=h, width=w, features=f,
                      base_filters=args.f0, factorized=args.factorized,
                      dropout_rate=args.dropout, head=head)
    model = _build(args.arch, cfg).initialize(seed=args.seed)
    checkpoint = os.path.join(args.out_dir, "checkpoint.btar")
    result = training.train(model, train_set, val_set, training.TrainConfig(
        loss=args.loss, learning_rate=args.lr, batch_size=args.batch,
        max_epochs=args.epochs, dropout_rate=args.dropout, seed=args.seed,
        checkpoint_path=checkpoint))
    history_path = os.path.join(args.out_dir, "history.csv")
    training.save_history_csv(result.history, history_path)
    best = Model.load(checkpoint)
    report = training.evaluate(best, test_set, args.threshold)
    baseline = training.evaluate(persistence_predict, test_set, args.threshold)
    _write_run_manifest(args.out_dir, "train", args,
                        [checkpoint, history_path], time.monotonic() - t0,
                        extra={"best_epoch": result.best_epoch,
                               "best_val_loss": result.best_val_loss,
                               "test_mse": report.mse,
                               "persistence_test_mse": baseline.mse})
    print(f"best epoch {result.best_epoch}: val loss {result.best_val_loss:.6g}")
    print(f"test mse {report.mse:.6g} (persistence {baseline.mse:.6g})")
    return 0


def _parse_horizons(text: str):
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    horizons = _parse_horizons(args.horizons) if args.horizons else [None]
    rows = []
    for h in horizons:
        ckpt = args.checkpoint.replace("{h}", str(h)) if h else args.checkpoint
        spath = args.samples.replace("{h}", str(h)) if h else args.samples
        model = Model.load(ckpt)
        samples = datapipe.load_samples(spath)
        report = training.evaluate(model, samples, args.threshold,
                                   args.denorm_factor)
        minutes = (h or samples.horizon) * args.cadence_minutes
        rows.append((minutes, report))
    with open(args.out, "w", newline="\n") as f:
        f.write(EVAL_COLUMNS + "\n")
        for minutes, r in rows:
            f.write(f"{minutes!r},{r.mse!r},{r.mse_binarized!r},"
                    f"{r.accuracy!r},{r.precision!r},{r.recall!r}\n")
    _write_run_manifest(os.path.dirname(args.out) or ".", "eval", args,
                        [args.out], time.monotonic() - t0)
    print(f"wrote {len(rows)} row(s) to {args.out}")
    return 0


def cmd_predict(args) -> int:
    t0 = time.monotonic()
    model = Model.load(args.checkpoint)
    samples = datapipe.load_samples(args.samples)
    if not 0 <= args.index < len(samples):
        raise ValueError(f"sample index {args.index} out of range")
    y = model.predict(samples.inputs[args.index])
    lo, hi = pgm.write_pgm(args.out, y[0, :, :, 0])
    _write_run_manifest(os.path.dirname(args.out) or ".", "predict", args,
                        [args.out], time.monotonic() - t0,
                        extra={"pgm_scale": {"lo": lo, "hi": hi}})
    print(f"prediction image -> {args.out} (scale {lo:.6g}..{hi:.6g})")
    return 0


def cmd_params(args) -> int:
    model = _build(args.arch, _model_config(args))
    total, table = model.count_params()
    for name, count in table:
        print(f"{name}\t{count}")
    out_shape = model.out_shape()
    print(f"input\t{model.input_shape()}")
    print(f"output\t{out_shape}")
    print(f"total\t{total}")
    return 0


def _primitive_layer_checks():
    conv = Conv3D(ConvSpec((2, 3, 3), 2, 3))
    dilated = Conv3D(ConvSpec((1, 3, 3), 2, 2, dilation=(1, 2, 2)))
    valid = Conv3D(ConvSpec((2, 3, 3), 2, 2, padding="valid"))
    return [
        ("conv3d_same", conv, (3, 6, 6, 2)),
        ("conv3d_dilated", dilated, (2, 8, 8, 2)),
        ("conv3d_valid", valid, (4, 8, 8, 2)),
        ("maxpool", MaxPoolSpatial(), (2, 6, 6, 3)),
        ("upsample", UpsampleNearestSpatial(), (2, 4, 4, 3)),
        ("relu", Activation("relu"), (2, 5, 5, 2)),
        ("sigmoid", Activation("sigmoid"), (2, 5, 5, 2)),
        ("image_level_pool", ImageLevelPool(), (2, 6, 6, 3)),
    ]


def cmd_grad_check(args) -> int:
    failed = False
    if args.arch == "layers":
        checks = _primitive_layer_checks()
        for name, layer, shape in checks:
            report = training.grad_check(layer, in_shape=shape, tol=args.tol)
            status = "pass" if report.passed else "FAIL"
            print(f"{status} {name}: max rel err {report.max_rel_error:.3e} "
                  f"(worst {report.worst})")
            failed |= not report.passed
    else:
        cfg = mini_config(head=args.head)
        builder = {"broad-unet-mini": build_broad_unet,
                   "unet-mini": build_plain_unet}
        if args.arch not in builder:
            raise ValueError(f"unknown grad-check target {args.arch!r}")
        model = builder[args.arch](cfg).initialize(seed=args.seed,
                                                   dtype=np.float64)
        report = training.grad_check(model, tol=args.tol, seed=args.seed)
        status = "pass" if report.passed else "FAIL"
        print(f"{status} {args.arch}: max rel err {report.max_rel_error:.3e} "
              f"(worst {report.worst})")
        failed = not report.passed
    return 3 if failed else 0


def cmd_dump_features(args) -> int:
    t0 = time.monotonic()
    model = Model.load(args.checkpoint)
    samples = datapipe.load_samples(args.samples)
    maps = dump_feature_maps(model, samples.inputs[args.index], args.block)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    archive_path = os.path.join(args.out_dir, f"block{args.block}_features.btar")
    datapipe.archive_save(archive_path, {label: arr for label, arr in maps})
    outputs.append(archive_path)
    scales = {}
    for label, arr in maps:
        path = os.path.join(args.out_dir, f"block{args.block}_{label}.pgm")
        lo, hi = pgm.write_pgm(path, arr[0, :, :, 0])
        scales[label] = {"lo": lo, "hi": hi}
        outputs.append(path)
    _write_run_manifest(args.out_dir, "dump-features", args, outputs,
                        time.monotonic() - t0, extra={"pgm_scales": scales})
    print(f"wrote {len(maps)} branch maps to {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--arch", default="broad-unet",
                   choices=["broad-unet", "unet"])
    p.add_argument("--t", type=int, default=12, help="input lags")
    p.add_argument("--hw", type=int, default=288, help="height = width")
    p.add_argument("--f", type=int, default=1, help="feature channels")
    p.add_argument("--f0", type=int, default=64, help="base filter count")
    p.add_argument("--head", default="regression",
                   choices=["regression", "binary"])
    p.add_argument("--factorized", action=argparse.BooleanOptionalAction,
                   default=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brunet", description="Broad-UNet nowcasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic advection sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--blobs", type=int, default=3)
    p.add_argument("--velocity", default="0,1", help="dy,dx per frame")
    p.add_argument("--sigma", type=float, default=2.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("preprocess", help="run a preprocessing pipeline")
    p.add_argument("--task", required=True, choices=["precip", "cloud"])
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rain-fraction", type=float, default=0.5)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("make-samples", help="window frames into samples")
    p.add_argument("--frames", required=True)
    p.add_argument("--lags", type=int, required=True)
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_samples)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--task", default="synth", choices=["synth", "precip", "cloud"])
    p.add_argument("--samples", default=None)
    p.add_argument("--arch", default="broad-unet", choices=["broad-unet", "unet"])
    p.add_argument("--f0", type=int, default=2)
    p.add_argument("--hw", type=int, default=16,
                   help="synthetic frame size when no --samples given")
    p.add_argument("--lags", type=int, default=4)
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--train-n", type=int, default=24)
    p.add_argument("--val-n", type=int, default=8)
    p.add_argument("--test-n", type=int, default=8)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--loss", default="mse", choices=["mse", "bce"])
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--factorized", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint path; may contain {h} with --horizons")
    p.add_argument("--samples", required=True,
                   help="samples path; may contain {h} with --horizons")
    p.add_argument("--horizons", default=None, help="e.g. 1-6 or 1,3,6")
    p.add_argument("--cadence-minutes", type=float, default=15.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--denorm-factor", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one sample and write a PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("params", help="parameter table and shape contract")
    _add_model_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--arch", default="broad-unet-mini",
                   choices=["layers", "broad-unet-mini", "unet-mini"])
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--head", default="regression",
                   choices=["regression", "binary"])
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-features", help="branch feature maps of one block")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dump_features)

    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (FormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
