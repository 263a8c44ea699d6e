#!/usr/bin/env python3
import argparse
import logging
import sys
from typing import List, Optional, Sequence

from .harness import DATASETS, FIT_MODES, TRAIN_MODES, ExperimentConfig, Harness
from .optim import OPTIMIZER_MODES

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _int_list(text: str) -> List[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    io = common.add_argument_group("data and outputs")
    io.add_argument("--data", help="Directory with the four MNIST IDX files (optionally .gz)")
    io.add_argument("--out", help="Output path (checkpoint for train, CSV otherwise)")
    io.add_argument("--ckpt", action="append", help="Checkpoint to evaluate (repeat for table)")
    io.add_argument("--cache", help="Alpha cache file (default: <ckpt>_cache.npz)")
    io.add_argument("--fits", help="eval-sweep: also write per-sample fit rows here")

    model = common.add_argument_group("model and training")
    model.add_argument("--mode", choices=TRAIN_MODES, help="vae, avae or avae-transopt")
    model.add_argument("--dataset", choices=DATASETS, help="Training/evaluation perturbations")
    model.add_argument("--latent", type=int, help="Latent size (default 8)")
    model.add_argument("--epochs", type=int, help="Epochs (default 15, 30 with --full)")
    model.add_argument("--batch", type=int, help="Batch size (default 256)")
    model.add_argument("--lr", type=float, help="Learning rate (default 0.001)")
    model.add_argument("--wd", type=float, help="Weight decay (default 0.0005)")
    model.add_argument("--normalize", action="store_true", default=None,
                       help="Normalize encoder inputs by training-set mean/std")
    model.add_argument("--train-n", type=int, help="Training subset size")
    model.add_argument("--val-n", type=int, help="Validation subset size")
    model.add_argument("--full", action="store_true", default=None,
                       help="Full-scale run: all images, 30 epochs")

    fit = common.add_argument_group("transform fitting")
    fit.add_argument("--restarts", type=int, help="Restart candidates per sample")
    fit.add_argument("--fit-steps", type=int, help="Gradient steps on alpha per survivor")
    fit.add_argument("--survivors", type=int, help="Candidates advanced to the gradient phase")
    fit.add_argument("--alpha-lr", type=float, help="Learning rate for alpha")
    fit.add_argument("--alpha-opt", choices=OPTIMIZER_MODES, help="Optimizer for alpha")
    fit.add_argument("--fit-mode", choices=FIT_MODES, help="Transform family")
    fit.add_argument("--no-fit", dest="fit", action="store_false", default=None,
                     help="Evaluate the plain VAE only")
    fit.add_argument("--angles", help="Rotation sweep LO:HI:STEP in degrees (default 0:180:15)")

    sweep = common.add_argument_group("sweeps and histograms")
    sweep.add_argument("--latent-sizes", type=_int_list, help="latent-sweep sizes (default 2,8,32)")
    sweep.add_argument("--seeds", type=int, help="latent-sweep seeds per cell (default 3)")
    sweep.add_argument("--digits", type=_int_list, help="rotation-hist digits (default 1,6,9)")
    sweep.add_argument("--hist-epochs", type=_int_list, help="rotation-hist epochs (default all)")

    run = common.add_argument_group("execution")
    run.add_argument("--seed", type=int, help="Random seed (default 0)")
    run.add_argument("--f64", action="store_true", default=None, help="Compute in float64")
    run.add_argument("--workers", type=int, help="Evaluation threads (default 4)")
    run.add_argument("--chunk", type=int, help="Samples per evaluation chunk (default 250)")
    run.add_argument("--quiet", action="store_true", default=None, help="Hide progress bars")
    run.add_argument("--log-level", default="INFO", help="Logging level")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avae", description="Affine VAE experiments")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")
    common = _common_parser()

    subparsers.add_parser("train", parents=[common], help="Train a model and write a checkpoint")
    subparsers.add_parser("eval-sweep", parents=[common], help="Loss over rotation angles")
    subparsers.add_parser("latent-sweep", parents=[common], help="Plain VAE loss over latent sizes")
    affine = subparsers.add_parser("affine-eval", parents=[common],
                                   help="VAE vs AVAE under random affine perturbations")
    affine.set_defaults(dataset="affine-aug", fit_mode="rsst")
    subparsers.add_parser("rotation-hist", parents=[common], help="Fitted-rotation histograms per epoch")
    subparsers.add_parser("table", parents=[common], help="Average sweep loss per checkpoint")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2

    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format=LOG_FORMAT)
    harness = Harness(workers=args.workers or 4)
    try:
        try:
            cfg = ExperimentConfig.from_args(args)
        except Exception as exc:
            return harness._handle_exception(exc)
        return harness.run(cfg)
    finally:
        harness.cleanup()


if __name__ == "__main__":
    sys.exit(main())
