"""Training command line: fit a source model on an exported corpus."""

import argparse
import logging
import sys

from .train import TrainingConfig, train_acvae


def main(argv=None):
    logging.basicConfig(level="INFO")
    parser = argparse.ArgumentParser(
        prog="fastsep-train",
        description="Train the class-conditional source model and export "
        "an FMVAE01 bundle.",
    )
    parser.add_argument("--corpus", required=True, help="exported corpus directory")
    parser.add_argument("--out", required=True, help="bundle output path")
    parser.add_argument("--classes", type=int, required=True)
    parser.add_argument("--epochs", type=int, default=120)
    parser.add_argument("--latent-channels", type=int, default=8)
    parser.add_argument("--hidden", type=int, default=48)
    parser.add_argument("--classifier-hidden", type=int, default=24)
    parser.add_argument("--lambda-mi", type=float, default=1.0)
    parser.add_argument("--lambda-ce", type=float, default=1.0)
    parser.add_argument("--learning-rate", type=float, default=1e-3)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--segment-frames", type=int, default=64)
    parser.add_argument("--win-ms", type=float, default=128.0)
    parser.add_argument("--hop-ms", type=float, default=64.0)
    parser.add_argument("--sample-rate", type=int, default=16000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--curve-out", default=None)
    args = parser.parse_args(argv)

    win = int(round(args.win_ms * args.sample_rate / 1000.0))
    if win % 2:
        win += 1
    config = TrainingConfig(
        corpus=args.corpus,
        class_count=args.classes,
        out=args.out,
        latent_channels=args.latent_channels,
        hidden=args.hidden,
        classifier_hidden=args.classifier_hidden,
        lambda_mi=args.lambda_mi,
        lambda_ce=args.lambda_ce,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        segment_frames=args.segment_frames,
        window_length=win,
        frame_shift=int(round(args.hop_ms * args.sample_rate / 1000.0)),
        sample_rate=args.sample_rate,
        seed=args.seed,
        curve_out=args.curve_out,
    )
    try:
        path, _ = train_acvae(config)
    except Exception as exc:  # noqa: BLE001 - single structured exit point
        print(f"fastsep-train: error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
