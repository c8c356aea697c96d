"""Command-line entry points.

Subcommands: train, certify, attack, sweep, select, sigma-study,
ibp-study, report. Any failure prints a one-line JSON error object to
stderr and exits nonzero. Perturbation-size parameters may be given in
pixel units (0..255) with --pixel-units; they are stored in [0,1].
"""

import argparse
import dataclasses
import json
import sys

import numpy as np

from ..attacks import (CaaConfig, caa_attack, cw_attack, deepfool_attack,
                       pgd_attack)
from ..ibp import IbpEvaluator
from ..model import accuracy, load_checkpoint, save_checkpoint
from ..model import checkpoint_hash as _model_hash
from ..smoothing import SmoothingConfig, certify
from .config import ExperimentConfig, from_toml
from .datasets import digits_idx_fixture, load_mnist_idx, make_synthetic
from .report import report
from .sweep import (_load_jsonl, build_dataset, build_model, ibp_study,
                    output_root, run_sweep, select_operating_point,
                    sigma_estimation_run)

_EPS_KEYS = ("eps_min", "eps_max", "eps_step")


def _emit(doc):
    print(json.dumps(doc, sort_keys=True))
    return 0


def _dataset_config(args):
    return ExperimentConfig(
        dataset=args.dataset, n_data=args.n_data, subset=1,
        idx_images=getattr(args, "idx_images", None),
        idx_labels=getattr(args, "idx_labels", None),
        arch=args.arch, hidden=tuple(int(h) for h in args.hidden.split(",")),
        train_sigma=args.train_sigma, epochs=args.epochs, seed=args.seed)


def cmd_train(args):
    cfg = _dataset_config(args)
    X, y = build_dataset(cfg)
    model = build_model(cfg, X, y)
    save_checkpoint(model, args.out)
    return _emit({"checkpoint": args.out, "model_hash": _model_hash(model),
                  "train_accuracy": accuracy(model, (X, y))})


def _resolve_input(args, model):
    if args.x is not None:
        x0 = np.array([float(v) for v in args.x.split(",")])
        return x0.reshape(model.input_shape), args.label
    if args.index is None:
        raise ValueError("give either --x or --dataset/--index")
    if args.dataset == "idx":
        images, labels = load_mnist_idx(args.idx_images, args.idx_labels)
        x0, label = images[args.index], int(labels[args.index])
    else:
        X, y = make_synthetic(args.dataset, args.n_data, seed=args.seed)
        x0, label = X[args.index], int(y[args.index])
    if args.label is not None:
        label = args.label
    return np.reshape(x0, model.input_shape), label


def cmd_certify(args):
    model = load_checkpoint(args.model)
    x0, _ = _resolve_input(args, model)
    if args.ibp:
        verdict = IbpEvaluator(model).certify(x0)
    else:
        verdict = certify(model, x0, SmoothingConfig(
            sigma=args.sigma, n_samples=args.n_samples, alpha=args.alpha,
            seed=args.seed))
    return _emit(verdict.to_json())


def _unscale(args):
    if not args.pixel_units:
        return
    for key in _EPS_KEYS:
        if getattr(args, key, None) is not None:
            setattr(args, key, getattr(args, key) / 255.0)


def cmd_attack(args):
    model = load_checkpoint(args.model)
    x0, label = _resolve_input(args, model)
    _unscale(args)
    loop = SmoothingConfig(sigma=args.sigma, n_samples=args.n_loop,
                           alpha=args.alpha, seed=args.seed)
    if args.method == "caa":
        ccfg = CaaConfig(smoothing=loop, eps_min=args.eps_min,
                         eps_max=args.eps_max, delta_grow=args.delta_grow,
                         delta_shrink=args.delta_shrink,
                         max_iters=args.iters, seed=args.seed,
                         recheck_n=args.recheck_n)
        res = caa_attack(model, x0, ccfg, original_class=label)
    elif args.method == "pgd":
        if label is None:
            raise ValueError("pgd needs --label or a dataset sample")
        res = pgd_attack(model, x0, label, args.eps_step, args.iters, loop,
                         recheck_n=args.recheck_n, seed=args.seed)
    elif args.method == "cw":
        if label is None:
            raise ValueError("cw needs --label or a dataset sample")
        res = cw_attack(model, x0, label, args.c, args.kappa, args.steps,
                        args.lr, loop, recheck_n=args.recheck_n)
    elif args.method == "deepfool":
        res = deepfool_attack(model, x0, args.iters, loop,
                              overshoot=args.overshoot,
                              recheck_n=args.recheck_n,
                              original_class=label)
    else:
        raise ValueError(f"unknown attack method {args.method!r}")
    return _emit(res.to_json(sample_id=args.index))


def _sweep_config(args):
    cfg = from_toml(args.config)
    if args.pixel_units:
        methods = {}
        for meth, grid in cfg.methods.items():
            methods[meth] = {
                k: ([v / 255.0 for v in vals] if k in _EPS_KEYS else vals)
                for k, vals in grid.items()}
        cfg = dataclasses.replace(cfg, methods=methods)
    return cfg


def cmd_sweep(args):
    record = run_sweep(_sweep_config(args))
    return _emit({"config_hash": record.config_hash,
                  "model_hash": record.model_hash,
                  "rows": len(record.rows), "metrics": record.metrics})


def cmd_select(args):
    run_dir = output_root() / args.run
    rows = list(_load_jsonl(run_dir / "rows.jsonl").values())
    if not rows:
        raise ValueError(f"no rows under {run_dir}")
    return _emit(select_operating_point(rows, args.target,
                                        sigma=args.sigma))


def cmd_sigma_study(args):
    cfg = _sweep_config(args)
    factors = [float(f) for f in args.factors.split(",")]
    results = sigma_estimation_run(cfg, args.sigma_true, factors)
    return _emit({"sigma_true": args.sigma_true, "results": [
        {k: v for k, v in r.items() if k != "rows"} for r in results]})


def cmd_ibp_study(args):
    cfg = _sweep_config(args)
    doc = ibp_study(cfg, iters=args.iters, eps_min=args.eps_min,
                    eps_max=args.eps_max, delta=args.delta,
                    eps_step=args.eps_step)
    return _emit({k: v for k, v in doc.items() if k != "rows"})


def cmd_report(args):
    paths = report(output_root() / args.run, args.out,
                   target_success=args.target)
    return _emit({"written": [str(p) for p in paths]})


def cmd_make_digits(args):
    images, labels = digits_idx_fixture(args.out, n=args.n_data)
    return _emit({"images": images, "labels": labels})


def _add_dataset_flags(p, with_arch=False):
    p.add_argument("--dataset", default="blobs",
                   choices=["blobs", "moons", "idx"])
    p.add_argument("--n-data", type=int, default=400)
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--seed", type=int, default=0)
    if with_arch:
        p.add_argument("--arch", default="mlp", choices=["mlp", "cnn"])
        p.add_argument("--hidden", default="64,64")
        p.add_argument("--train-sigma", type=float, default=0.5)
        p.add_argument("--epochs", type=int, default=10)


def _add_input_flags(p):
    p.add_argument("--model", required=True)
    p.add_argument("--x", help="comma-separated input coordinates")
    p.add_argument("--index", type=int, help="dataset sample index")
    p.add_argument("--label", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="certattack",
        description="certification-aware attacks on certified classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and checkpoint a base model")
    _add_dataset_flags(p, with_arch=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="certify one input")
    _add_dataset_flags(p)
    _add_input_flags(p)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--alpha", type=float, default=0.005)
    p.add_argument("--ibp", action="store_true",
                   help="interval verdict instead of smoothing")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("attack", help="attack one input")
    _add_dataset_flags(p)
    _add_input_flags(p)
    p.add_argument("--method", required=True,
                   choices=["caa", "pgd", "cw", "deepfool"])
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--n-loop", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--recheck-n", type=int)
    p.add_argument("--pixel-units", action="store_true",
                   help="eps parameters are in 0..255 pixel units")
    p.add_argument("--eps-min", type=float, default=4 / 255)
    p.add_argument("--eps-max", type=float, default=100 / 255)
    p.add_argument("--delta-grow", type=float, default=0.05)
    p.add_argument("--delta-shrink", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--eps-step", type=float, default=0.02)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--overshoot", type=float, default=1.02)
    p.set_defaults(func=cmd_attack)

    for name, func in (("sweep", cmd_sweep), ("sigma-study", cmd_sigma_study),
                       ("ibp-study", cmd_ibp_study)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--pixel-units", action="store_true")
        if name == "sigma-study":
            p.add_argument("--sigma-true", type=float, required=True)
            p.add_argument("--factors", default="0.5,1.0,1.5")
        if name == "ibp-study":
            p.add_argument("--iters", type=int, default=30)
            p.add_argument("--eps-min", type=float, default=0.02)
            p.add_argument("--eps-max", type=float, default=0.6)
            p.add_argument("--delta", type=float, default=0.1)
            p.add_argument("--eps-step", type=float, default=0.05)
        p.set_defaults(func=func)

    p = sub.add_parser("select", help="pick per-method operating points")
    p.add_argument("--run", required=True)
    p.add_argument("--target", type=float, default=0.9)
    p.add_argument("--sigma", type=float)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("report", help="render tables and plots for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--target", type=float, default=0.9)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-digits",
                       help="write the bundled digits set as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-data", type=int, default=None)
    p.set_defaults(func=cmd_make_digits)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001  - the CLI error contract
        print(json.dumps({"error": str(exc),
                          "type": type(exc).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
