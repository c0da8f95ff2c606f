"""``caflow`` command line: data generation and import, training, evaluation,
ablation, front-door verification and error reports.

Exit codes: 0 success, 2 usage or configuration error, 3 data or format
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data, metrics, report, scm, trainer
from .errors import (CaflowError, ConfigError, ContractError, DomainError, FormatError,
                     IngestionError, MetricError, NumericError)
from .model import load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "CAFLOW_SEED"

log = logging.getLogger("caflow")


def load_mapping(path):
    """Parse a flat YAML (or JSON) mapping, reporting the line of any syntax error."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        mapping = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}: cannot parse config{where}") from None
    if mapping is None:
        return {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: config must be a key-value mapping")
    for key, value in mapping.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{path}: field {key!r} must be a scalar (flat schema)")
    return mapping


def train_config(path=None, overrides=None):
    mapping = load_mapping(path) if path else {}
    mapping.update({k: v for k, v in (overrides or {}).items() if v is not None})
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            mapping["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    return trainer.TrainConfig.from_mapping(mapping)


def _load_split(path):
    if not Path(path).is_dir():
        raise IngestionError(f"data directory not found: {path}")
    return data.read_features(path)


def _ensure_dir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot create output directory {path}: {exc.strerror}") from None
    return Path(path)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args):
    mapping = load_mapping(args.spec) if args.spec else {}
    if args.seed is not None:
        mapping["seed"] = args.seed
    spec = data.SyntheticSpec.from_mapping(mapping)
    out = _ensure_dir(args.out)
    split = data.generate_synthetic(spec)
    data.write_features(split, out)
    print(f"M={spec.M} D={spec.D} train={len(split.train)} test={len(split.test)} "
          f"causal_clips={spec.n_causal}")
    for name in ("train", "test"):
        records = getattr(split, name)
        if len(records) > 1:
            c = np.array([r.meta["confounder"] for r in records], dtype=np.float64)
            s = np.array([r.score for r in records])
            corr = float(np.corrcoef(c, s)[0, 1]) if c.std() > 0 and s.std() > 0 else 0.0
            print(f"{name}: confounder-score correlation {corr:+.4f}")
    return EXIT_OK


def cmd_import(args):
    split = data.import_external(args.features, args.manifest, M=args.clips,
                                 s_min=args.s_min, s_max=args.s_max)
    out = _ensure_dir(args.out)
    data.write_features(split, out)
    print(f"imported train={len(split.train)} test={len(split.test)} "
          f"M={args.clips} range=[{split.s_min}, {split.s_max}]")
    return EXIT_OK


def cmd_train(args):
    config = train_config(args.config, {"epochs": args.epochs, "seed": args.seed})
    split = _load_split(args.data)
    out = _ensure_dir(args.out)
    result = trainer.train(config, split, out)
    best = result.log.best_srcc
    print(f"best epoch {result.log.best_epoch} srcc "
          f"{'n/a' if best is None else f'{best:.4f}'}; wrote {out}")
    return EXIT_OK


def cmd_eval(args):
    expected = None
    if args.config:
        expected = train_config(args.config).model_config().hash()
    model, _ = load_checkpoint(args.checkpoint, expected_hash=expected)
    split = _load_split(args.data)
    X, y = split.arrays("test")
    if len(X) == 0:
        X, y = split.arrays("train")
        records = split.train
    else:
        records = split.test
    pred = model.predict(X, split.s_min, split.s_max)
    cats = None
    if args.per_category:
        cats = [r.meta.get("category", "all") for r in records]
    rep = metrics.evaluate(y, pred, split.s_min, split.s_max, categories=cats)
    text = rep.to_csv()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        _ensure_dir(out.parent)
        out.write_text(text)
        trainer.write_predictions(out.with_name("predictions.csv"), y, pred,
                                  [r.meta.get("category", "all") for r in records])
    return EXIT_OK


def cmd_ablate(args):
    config = train_config(args.config, {"epochs": args.epochs, "seed": args.seed})
    split = _load_split(args.data)
    out = _ensure_dir(args.out)
    _, text, _ = trainer.ablate(config, split, out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify_frontdoor(args):
    gap = scm.verify_front_door(args.n_models, args.seed, args.min_card, args.max_card)
    ok = gap <= args.tol
    print(f"models={args.n_models} max_tv={gap:.3e} tol={args.tol:.1e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_report(args):
    summaries, errors = report.build_report(args.runs, args.max_error)
    out = _ensure_dir(args.out or args.runs)
    text = report.to_csv(summaries)
    (out / "error_report.csv").write_text(text)
    sys.stdout.write(text)
    if not args.no_plots:
        report.plot(errors, out, args.max_error)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _range(lo, hi, kind=int):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        if not lo <= value <= hi:
            raise argparse.ArgumentTypeError(f"must lie in [{lo}, {hi}], got {value}")
        return value
    return parse


def build_parser():
    parser = argparse.ArgumentParser(prog="caflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic confounded split")
    p.add_argument("--spec", help="YAML file of SyntheticSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("import", help="convert external clip features to CAFW")
    p.add_argument("--features", required=True, help="directory of .npy or .cafw files")
    p.add_argument("--manifest", required=True, help="CSV or JSON manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=_range(2, 10**6), default=data.CLIP_COUNTS["rg"],
                   help="clips per video after truncation or tiling (default: %(default)s)")
    p.add_argument("--s-min", type=float)
    p.add_argument("--s-max", type=float)
    p.set_defaults(func=cmd_import)

    for name, func, text in (("train", cmd_train, "train one model"),
                             ("ablate", cmd_ablate, "train the four ablation variants")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--data", required=True)
        p.add_argument("--config", help="YAML file of TrainConfig fields")
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=_range(0, 10**6))
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="refuse unless this config matches the checkpoint")
    p.add_argument("--per-category", action="store_true")
    p.add_argument("--out", help="CSV path for the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-frontdoor", help="check front-door identification on random SCMs")
    p.add_argument("--n-models", type=_range(1, 10**6), default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-card", type=_range(2, 16), default=2)
    p.add_argument("--max-card", type=_range(2, 16), default=4)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_verify_frontdoor)

    p = sub.add_parser("report", help="error statistics and plots from saved predictions")
    p.add_argument("--runs", required=True)
    p.add_argument("--out")
    p.add_argument("--max-error", type=_range(1e-12, float("inf"), float), default=5.0)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"caflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, IngestionError, MetricError, OSError) as exc:
        print(f"caflow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ContractError, DomainError) as exc:
        print(f"caflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CaflowError as exc:
        print(f"caflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
