"""Command-line entry point: ``mudra {simulate,fit,predict,embed,eval,bench}``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings

import numpy as np

from . import datagen
from .classify import embed, predict
from .data import read_dataset, write_dataset
from .errors import NumericalError, ValidationError
from .harness import PIPELINES, bench, evaluate
from .model import FitConfig, FittedModel, fit

log = logging.getLogger("mudra")


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (exit 1); 2 is reserved for numerics
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive(flag):
    def check(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} must be an integer, got {text!r}")
        if value < 1:
            raise argparse.ArgumentTypeError(f"{flag} must be >= 1, got {value}")
        return value

    return check


def _add_fit_flags(p):
    p.add_argument("--basis", type=_positive("--basis"), default=7, help="number of B-splines b")
    p.add_argument("--rank", type=_positive("--rank"), default=2, help="representation rank r")
    p.add_argument("--max-iter", type=_positive("--max-iter"), default=100)
    p.add_argument("--tol", type=float, default=0.0,
                   help="extra stop on relative likelihood gain (0 = off)")
    p.add_argument("--prior", choices=("uniform", "empirical"), default="uniform")
    p.add_argument("--threads", type=_positive("--threads"), default=1,
                   help="parallel E-step workers (results do not depend on it)")
    p.add_argument("--domain", type=float, nargs=2, metavar=("T_MIN", "T_MAX"),
                   help="spline domain (default: training time range)")


def _fit_config(args):
    if args.basis < 4:
        raise ValidationError(f"--basis must be >= 4, got {args.basis}")
    if args.rank > args.basis:
        raise ValidationError(f"--rank {args.rank} exceeds --basis {args.basis}")
    return FitConfig(
        max_outer_iters=args.max_iter,
        tol=args.tol,
        prior=args.prior,
        n_jobs=args.threads,
        domain=tuple(args.domain) if args.domain else None,
    )


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    parser = _Parser(prog="mudra", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common],
                       help="write a synthetic dataset and its ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="ground-truth sidecar path")
    p.add_argument("--classes", type=_positive("--classes"), default=3)
    p.add_argument("--features", type=_positive("--features"), default=2)
    p.add_argument("--times", type=_positive("--times"), default=12)
    p.add_argument("--per-class", type=_positive("--per-class"), default=100)
    p.add_argument("--ar-scale", type=float, default=0.1)
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.add_argument("--noiseless", action="store_true", help="no noise at all (test sets)")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--assignment-seed", type=int,
                   help="seed of the curve assignment and covariances (default: --seed)")
    p.add_argument("--missing", choices=("none", "counts", "capped"), default="none")
    p.add_argument("--time-keep", type=int, nargs=2, default=(1, 11), metavar=("LO", "HI"))
    p.add_argument("--feature-keep", type=int, nargs=2, default=(1, 2), metavar=("LO", "HI"))
    p.add_argument("--time-cap", type=float, default=0.5)
    p.add_argument("--feature-cap", type=float, default=0.55)
    p.add_argument("--downsample", type=_positive("--downsample"), default=1)

    p = sub.add_parser("fit", parents=[common], help="fit a model and write it as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)

    for name, helptext in (("predict", "write predicted labels"), ("embed", "write embeddings")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", help="JSONL output (default: stdout)")

    p = sub.add_parser("eval", parents=[common],
                       help="train/test evaluation report as JSON on stdout")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--model", help="use a fitted model instead of fitting on --train")
    p.add_argument("--pipeline", choices=PIPELINES, default="bayes")
    p.add_argument("--ridge-lambda", type=float, default=1.0)
    p.add_argument("--truth", help="ground-truth sidecar for functional MSE")
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)

    p = sub.add_parser("bench", parents=[common], help="time repeated fits")
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=_positive("--repeats"), default=10)
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)
    return parser


def _emit(records, path):
    lines = "".join(json.dumps(r) + "\n" for r in records)
    if path:
        with open(path, "w") as fh:
            fh.write(lines)
    else:
        sys.stdout.write(lines)


def _load_model_for(args):
    model = FittedModel.load(args.model)
    data = read_dataset(args.data)
    if data.feature_count > model.params.feature_count:
        raise ValidationError(
            f"dataset uses {data.feature_count} features but the model was fit on "
            f"{model.params.feature_count}"
        )
    return model, data


def cmd_simulate(args):
    seed = args.seed if args.assignment_seed is None else args.assignment_seed
    base = datagen.resolve_config(datagen.SynthConfig(
        K=args.classes, F=args.features, T=args.times, m=args.per_class,
        ar_scale=args.ar_scale, noise_scale=args.noise_scale, seed=seed,
    ))
    config = base
    if args.noiseless:
        tiny_t = 1e-12 * np.eye(args.times)
        tiny_f = 1e-12 * np.eye(args.features)
        config = datagen.SynthConfig(**{**base.__dict__, "Sigma_T": tiny_t, "Psi_F": tiny_f,
                                        "noise_scale": 0.0})
    dataset, truth = datagen.generate_synthetic(config, rng=args.seed)
    if args.downsample > 1:
        dataset = datagen.downsample(dataset, args.downsample)
    if args.missing != "none":
        policy = datagen.MissingnessPolicy(
            mode="per-sample-counts" if args.missing == "counts" else "capped-proportions",
            time_keep_range=tuple(args.time_keep),
            feature_keep_range=tuple(args.feature_keep),
            time_cap=args.time_cap,
            feature_cap=args.feature_cap,
        )
        dataset = datagen.apply_missingness(dataset, policy, rng=[args.seed, 2])
    write_dataset(dataset, args.out)
    if args.truth:
        datagen.write_truth(truth, args.truth)
    return 0


def cmd_fit(args):
    config = _fit_config(args)
    data = read_dataset(args.data)
    model = fit(data, args.basis, args.rank, config, rng=args.seed)
    model.save(args.out)
    d = model.diagnostics
    log.info("fit: %d iterations, final Q %.4f (%s)", d.iterations, d.final_Q, d.reason)
    return 0


def cmd_predict(args):
    model, data = _load_model_for(args)
    labels = predict(model, data.samples)
    _emit(({"id": s.id, "class": lab} for s, lab in zip(data, labels)), args.out)
    return 0 if all(lab is not None for lab in labels) else 2


def cmd_embed(args):
    model, data = _load_model_for(args)
    records = []
    for s in data:
        e = embed(model, s)
        records.append({"id": s.id, "alpha_hat": e.alpha_hat.tolist(),
                        "rank_deficient": e.rank_deficient})
    _emit(records, args.out)
    return 0


def cmd_eval(args):
    config = _fit_config(args)
    train = read_dataset(args.train)
    test = read_dataset(args.test)
    model = FittedModel.load(args.model) if args.model else None
    truth = datagen.read_truth(args.truth) if args.truth else None
    report = evaluate(
        train, test, args.pipeline, b=args.basis, r=args.rank, config=config,
        seed=args.seed, ridge_lambda=args.ridge_lambda, truth=truth, model=model,
    )
    json.dump(report.to_dict(), sys.stdout)
    sys.stdout.write("\n")
    return 0


def cmd_bench(args):
    config = _fit_config(args)
    data = read_dataset(args.data)
    stats = bench(data, args.basis, args.rank, args.repeats, config, args.seed)
    json.dump(stats, sys.stdout)
    sys.stdout.write("\n")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"mudra {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mudra {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"mudra {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
