"""Command-line entry point: ``dropleak {attack,sweep,train,gradcheck}``."""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data
from .attack import AttackConfig, capture_gradients, extract_label, run_attack
from .harness import ExperimentConfig, emit_figures, load_image, run_sweep, train_classifier, write_synthetic_cifar


def _add_attack_flags(p, sweep=False):
    p.add_argument("--iterations", type=int, default=None if sweep else 5800)
    p.add_argument("--optimizer", choices=["lbfgs", "adam"], default=None if sweep else "lbfgs")
    p.add_argument("--lr", type=float, default=None if sweep else 1.0)
    p.add_argument("--mask-policy", choices=["resample", "expected", "oracle"], default=None if sweep else "resample")
    p.add_argument("--label-mode", choices=["extracted", "joint"], default=None if sweep else "extracted")
    p.add_argument("--cifar", metavar="PATH", help="CIFAR-10 binary batch file")
    p.add_argument("--synth", choices=["noise", "gradient-ramp", "checkerboard"], help="synthetic image kind")
    p.add_argument("--image-size", type=int, default=None if sweep else 32)
    p.add_argument("--out", metavar="DIR")


def build_parser():
    parser = argparse.ArgumentParser(prog="dropleak", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="reconstruct one image from its captured gradient")
    p.add_argument("--dropout-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-index", type=int, default=0)
    _add_attack_flags(p)

    p = sub.add_parser("sweep", help="attack across dropout rates and seeds")
    p.add_argument("--config", metavar="FILE", help="flat 'key = value' config file")
    p.add_argument("--dropout-rate", type=float, action="append", dest="dropout_rates",
                   help="repeatable; overrides sweep.dropout_rates")
    p.add_argument("--seed", type=int, action="append", dest="seeds", help="repeatable; overrides sweep.seeds")
    p.add_argument("--image-index", type=int, action="append", dest="image_indices")
    p.add_argument("--jobs", type=int)
    _add_attack_flags(p, sweep=True)

    p = sub.add_parser("train", help="train the classifier and report test accuracy")
    p.add_argument("--dropout-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cifar", metavar="DIR", help="directory with data_batch_*.bin and test_batch.bin")
    p.add_argument("--synth-data", metavar="DIR", help="generate a synthetic CIFAR-format dataset here and use it")
    p.add_argument("--train-subset", type=int, default=2000)
    p.add_argument("--test-subset", type=int)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)

    p = sub.add_parser("gradcheck", help="verify engine gradients against finite differences")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    return parser


def cmd_attack(args):
    if args.cifar:
        cfg = ExperimentConfig(image_source="cifar", cifar_path=args.cifar, image_indices=[args.image_index])
    else:
        cfg = ExperimentConfig(synth_kind=args.synth or "noise", image_size=args.image_size,
                               image_indices=[args.image_index])
    truth, label = load_image(cfg, args.image_index)
    from .nn import build_lenet
    model = build_lenet(10, args.dropout_rate, seed=args.seed, image_size=truth.shape[1])
    capture = capture_gradients(model, truth, label, victim_seed=args.seed + 1)
    config = AttackConfig(iterations=args.iterations, optimizer=args.optimizer, lr=args.lr,
                          mask_policy=args.mask_policy, label_mode=args.label_mode, init_seed=args.seed)
    trace = run_attack(model, capture, truth, config)
    out = args.out or "runs/attack"
    os.makedirs(out, exist_ok=True)
    data.export_trace_csv(trace, os.path.join(out, "trace.csv"))
    data.export_ppm(trace.reconstruction, os.path.join(out, "recon.ppm"))
    data.export_ppm(truth, os.path.join(out, "truth.ppm"))
    print(json.dumps({"true_label": label, "extracted_label": extract_label(capture),
                      "final_rmse": trace.final_rmse, "final_distance": trace.final_distance,
                      "iterations": len(trace), "diverged": trace.diverged}))
    return 0


def cmd_sweep(args):
    overrides = {
        "dropout_rates": args.dropout_rates, "seeds": args.seeds, "image_indices": args.image_indices,
        "jobs": args.jobs, "iterations": args.iterations, "optimizer": args.optimizer, "lr": args.lr,
        "mask_policy": args.mask_policy, "label_mode": args.label_mode, "image_size": args.image_size,
        "out_dir": args.out,
    }
    if args.cifar:
        overrides.update(image_source="cifar", cifar_path=args.cifar)
    if args.synth:
        overrides.update(image_source="synth", synth_kind=args.synth)
    text = None
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
        config = ExperimentConfig.from_text(text, **overrides)
        if any(v is not None for v in overrides.values()):
            text = None  # flags changed the config; snapshot the effective one
    else:
        config = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    report = run_sweep(config, config_text=text)
    emit_figures(report, config.out_dir)
    for rate, m in report.medians().items():
        print(json.dumps({"rate": rate, **m}))
    return 0


def cmd_train(args):
    data_dir = args.cifar
    if args.synth_data:
        data_dir = write_synthetic_cifar(args.synth_data, n_train=args.train_subset, seed=args.seed)
    if not data_dir:
        raise FileNotFoundError("pass --cifar DIR or --synth-data DIR")
    acc = train_classifier(args.dropout_rate, args.train_subset, args.epochs, args.seed, data_dir,
                           batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                           test_subset=args.test_subset)
    print(json.dumps({"dropout_rate": args.dropout_rate, "seed": args.seed, "accuracy": acc}))
    return 0


def cmd_gradcheck(args):
    from .checks import layer_gradient_errors
    worst = 0.0
    for name, err in layer_gradient_errors(range(args.seeds)):
        worst = max(worst, err)
        print(json.dumps({"check": name, "max_rel_error": err, "ok": err < args.tol}))
    return 0 if worst < args.tol else 1


COMMANDS = {"attack": cmd_attack, "sweep": cmd_sweep, "train": cmd_train, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
