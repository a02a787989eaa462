"""The `coronagan` command line: phantoms, training, inference, evaluation, plots.

Every subcommand prints its resolved configuration (including the seed)
before doing work, exits 0 on success, and reports failures as a single
machine-parsable `error: ...` line on stderr with a non-zero exit code.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import yaml

from . import evaluation, imgio, plotting, training
from .autodiff import no_grad
from .phantom import PhantomDistribution, generate_dataset


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except BrokenPipeError:
        raise
    except Exception as e:  # noqa: BLE001 - single-line error contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coronagan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-phantoms", help="generate an unpaired phantom dataset with masks")
    p.add_argument("--n-oct", type=int, required=True)
    p.add_argument("--n-hist", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=288)
    p.add_argument("--width", type=int, default=288)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(handler=cmd_gen_phantoms)

    p = sub.add_parser("train", help="train the translation networks on a manifest")
    p.add_argument("--config", required=True, help="flat YAML key/value file of training settings")
    p.add_argument("--data", required=True, help="dataset manifest (JSONL)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and the loss CSV")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="translate images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=["o2h", "h2o"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--montage", action="store_true", help="also write input|output side-by-side panels")
    p.add_argument("--pad-to-multiple", action="store_true", help="edge-pad inputs up to the required multiple and crop the output back")
    p.add_argument("inputs", nargs="+", help="input PNG images")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("evaluate", help="PHV-score translated test images against real histology")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="test manifest (JSONL)")
    p.add_argument("--threshold", type=float, default=evaluation.DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True, help="output report JSON path")
    p.add_argument("--extractor", choices=["fallback", "resnet101"], default="fallback")
    p.add_argument("--pairing", choices=["all", "best"], default="all")
    p.add_argument("--seed", type=int, default=0, help="seed for the fallback extractor")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("plot-losses", help="two-panel loss-curve figure from a training CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_plot_losses)

    return parser


def _announce(subcommand: str, config: dict) -> None:
    print(f"coronagan {subcommand} config: {json.dumps(config, sort_keys=True, default=str)}")


def cmd_gen_phantoms(args) -> int:
    dist = PhantomDistribution(height=args.height, width=args.width)
    config = {"n_oct": args.n_oct, "n_hist": args.n_hist, "out": args.out, "seed": args.seed, "workers": args.workers}
    config.update(asdict(dist))
    _announce("gen-phantoms", config)
    manifest = generate_dataset(args.n_oct, args.n_hist, dist, args.out, seed=args.seed, workers=args.workers)
    print(f"wrote {args.n_oct} OCT + {args.n_hist} histology samples; manifest: {manifest}")
    return 0


def load_training_config(path: str, out_dir: str) -> training.TrainingConfig:
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: training config must be a flat key/value mapping")
    raw["out_dir"] = out_dir
    return training.config_from_mapping(raw)


def cmd_train(args) -> int:
    config = load_training_config(args.config, args.out)
    _announce("train", asdict(config))
    final = training.train(config, args.data, resume=args.resume)
    print(f"final checkpoint: {final}")
    print(f"loss log: {os.path.join(config.out_dir, 'losses.csv')}")
    return 0


def cmd_infer(args) -> int:
    _announce("infer", {k: getattr(args, k) for k in ("checkpoint", "direction", "out", "montage", "pad_to_multiple", "inputs")})
    state = training.load_checkpoint(args.checkpoint)
    generator = state.model.g_oh if args.direction == "o2h" else state.model.g_ho
    multiple = generator.config.downscale
    os.makedirs(args.out, exist_ok=True)
    for path in args.inputs:
        image = imgio.load_image(path)
        c, h, w = image.shape
        if c != generator.config.in_channels:
            raise ValueError(
                f"{path}: direction {args.direction} expects {generator.config.in_channels}-channel input, got {c}"
            )
        pad_h = (-h) % multiple
        pad_w = (-w) % multiple
        if (pad_h or pad_w) and not args.pad_to_multiple:
            raise ValueError(
                f"{path}: image dims {h}x{w} not divisible by {multiple}; pass --pad-to-multiple to edge-pad and crop"
            )
        padded = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
        with no_grad():
            translated, _ = generator(padded[None].astype(generator.config.np_dtype))
        output = np.clip(translated.data[0][:, :h, :w], 0.0, 1.0)
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out, f"{stem}_{args.direction}.png")
        imgio.save_image(out_path, output)
        print(f"wrote {out_path}")
        if args.montage:
            montage_path = os.path.join(args.out, f"{stem}_{args.direction}_montage.png")
            imgio.save_image(montage_path, _montage(image, output))
            print(f"wrote {montage_path}")
    return 0


def _montage(input_image: np.ndarray, output_image: np.ndarray) -> np.ndarray:
    """Input on the left, translation on the right, separated by a white gutter."""
    def as_rgb(img):
        return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img

    left, right = as_rgb(input_image), as_rgb(output_image)
    gutter = np.ones((3, left.shape[1], 4), dtype=left.dtype)
    return np.concatenate([left, gutter, right], axis=2)


def cmd_evaluate(args) -> int:
    _announce("evaluate", {k: getattr(args, k) for k in ("checkpoint", "data", "threshold", "out", "extractor", "pairing", "seed")})
    extractor = evaluation.get_extractor(args.extractor, seed=args.seed)
    report = evaluation.evaluate_testset(
        args.checkpoint, args.data, extractor, threshold=args.threshold, pairing=args.pairing
    )
    report.save(args.out)
    print(f"PHV_1={report.phv_1:.3f} PHV_2={report.phv_2:.3f} PHV_3={report.phv_3:.3f} over {report.n_pairs} pairs")
    print(f"wrote {args.out}")
    return 0


def cmd_plot_losses(args) -> int:
    _announce("plot-losses", {"csv": args.csv, "out": args.out})
    out = plotting.plot_losses(args.csv, args.out)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
