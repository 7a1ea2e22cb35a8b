"""Command-line entry point: ``mocsurv {synth,train,eval,pairs,km}``.

Every subcommand accepts ``--config FILE`` (JSON or YAML) holding sections
``synth``, ``train``, ``model`` and top-level ``k`` / ``split_seed``; flags
given on the command line override file values.  Failures exit nonzero and
print one line ``error: <category>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .data import CohortLoadError, SynthConfig, build_pairs, generate_synthetic, load_cohort, save_cohort
from .metrics import MetricError, c_index, km_curve, logrank_test, median_split
from .predictors import CheckpointError
from .trainer import TrainConfig, TrainingError

EXIT_CODES = {"usage": 2, "load": 3, "checkpoint": 4, "train": 5, "metric": 6, "io": 7}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        self.category = category
        super().__init__(message)


def _read_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _dataclass_from(cls, base: dict, overrides: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    merged = {**base, **overrides}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise CLIError("usage", f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise CLIError("usage", str(exc)) from exc


SYNTH_FLAGS = ("n", "censor_frac", "beta", "noise_sigma", "d_p", "d_g", "bag_mean", "seed")
TRAIN_FLAGS = ("learning_rate", "accumulation_forwards", "dropout_rate", "epochs", "seed",
               "loss_mode", "optimizer")


def _load(manifest):
    try:
        return load_cohort(manifest)
    except CohortLoadError as exc:
        raise CLIError("load", str(exc)) from exc


def _cohort_from(args, conf):
    if args.manifest is not None:
        return _load(args.manifest), {"manifest": str(args.manifest)}
    if "synth" in conf:
        cfg = _dataclass_from(SynthConfig, conf["synth"], {})
        return generate_synthetic(cfg), {"synth": dataclasses.asdict(cfg)}
    raise CLIError("usage", "give --manifest or a config file with a 'synth' section")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    conf = _read_config(args.config)
    cfg = _dataclass_from(SynthConfig, conf.get("synth", {}), _overrides(args, SYNTH_FLAGS))
    cohort = generate_synthetic(cfg)
    out = Path(args.out)
    try:
        manifest = save_cohort(cohort, out)
        (out / "synth_config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CLIError("io", f"cannot write to {out}: {exc.strerror}") from exc
    oracle = c_index(cohort.records, cohort.latent)
    print(f"wrote {len(cohort.records)} records to {manifest}")
    print(f"oracle_c_index={oracle:.4f}")
    return 0


def cmd_train(args) -> int:
    conf = _read_config(args.config)
    cohort, source = _cohort_from(args, conf)
    cfg = _dataclass_from(TrainConfig, conf.get("train", {}), _overrides(args, TRAIN_FLAGS))
    k = args.k if args.k is not None else conf.get("k", 5)
    split_seed = args.split_seed if args.split_seed is not None else conf.get("split_seed", cfg.seed)
    model = conf.get("model", {})
    if k > len(cohort.records) or k < 2:
        raise CLIError("usage", f"k={k} invalid for {len(cohort.records)} samples")
    run_config = {**source, "train": cfg.to_dict(), "model": model, "k": k, "split_seed": split_seed}
    try:
        experiment.write_run_config(args.out, run_config)
        folds = experiment.train_folds(cohort, cfg, k, split_seed, model, args.out)
    except experiment.FoldError as exc:
        raise CLIError("train", str(exc)) from exc
    except OSError as exc:
        raise CLIError("io", str(exc)) from exc
    for f in folds:
        print(f"fold {f.fold}: {f.n_pairs} pairs, {len(f.val_ids)} validation samples")
    return 0


def cmd_eval(args) -> int:
    conf = json.loads((Path(args.run) / "run_config.json").read_text())
    if args.manifest is not None:
        cohort = _load(args.manifest)
    elif "manifest" in conf:
        cohort = _load(conf["manifest"])
    else:
        cohort = generate_synthetic(SynthConfig(**conf["synth"]))
    try:
        ev = experiment.evaluate_run(args.run, cohort, oracle=args.oracle, plot=not args.no_plot)
    except CheckpointError as exc:
        raise CLIError("checkpoint", str(exc)) from exc
    except MetricError as exc:
        raise CLIError("metric", str(exc)) from exc
    r = ev.report
    print(f"c_index={r.mean:.4f}+-{r.std:.4f} logrank_p={r.logrank_p:.4g}")
    return 0


def cmd_pairs(args) -> int:
    conf = _read_config(args.config)
    cohort, _ = _cohort_from(args, conf)
    pairs = build_pairs(cohort)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["higher_id", "lower_id"])
        for p in pairs:
            w.writerow([p.higher_id, p.lower_id])
    finally:
        if args.out:
            fh.close()
    print(f"{len(pairs)} pairs", file=sys.stderr)
    return 0


def cmd_km(args) -> int:
    cohort = _load(args.manifest)
    with open(args.risk, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "id" not in rows[0] or "risk" not in rows[0]:
        raise CLIError("load", f"{args.risk}: expected columns id,risk")
    risk = {row["id"]: float(row["risk"]) for row in rows}
    ids = [r.id for r in cohort.records if r.id in risk]
    high, low = median_split(ids, risk)
    ga = [cohort.record(i) for i in high]
    gb = [cohort.record(i) for i in low]
    lr = logrank_test(ga, gb)
    curves = {"high": km_curve(ga), "low": km_curve(gb)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "km.csv").write_text("\n".join(experiment.km_rows(curves, {"high": high, "low": low})) + "\n")
    if not args.no_plot:
        from .plotting import plot_km

        plot_km(curves, out / "km.svg", lr.p_value)
    print(f"logrank_statistic={lr.statistic:.4f} logrank_p={lr.p_value:.4g} n_high={len(high)} n_low={len(low)}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mocsurv", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort on disk")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--censor-frac", dest="censor_frac", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--d-p", dest="d_p", type=int)
    p.add_argument("--d-g", dest="d_g", type=int)
    p.add_argument("--bag-mean", dest="bag_mean", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="k-fold training; one checkpoint and log per fold")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--accumulation-forwards", dest="accumulation_forwards", type=int)
    p.add_argument("--dropout", dest="dropout_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-mode", dest="loss_mode",
                   choices=["moc", "intra_only", "oc_unimodal_path", "oc_unimodal_gene", "cox_baseline"])
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="validation C-index, median split, KM curves and log-rank test")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest")
    p.add_argument("--oracle", action="store_true", help="score with the latent sidecar instead of the model")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pairs", help="dump contrast pairs for audit")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("km", help="KM curves and log-rank test for a median split of given risks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--risk", required=True, help="CSV with columns id,risk")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_km)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        category = exc.category
        message = str(exc)
    except CohortLoadError as exc:
        category, message = "load", str(exc)
    except CheckpointError as exc:
        category, message = "checkpoint", str(exc)
    except (TrainingError, experiment.FoldError) as exc:
        category, message = "train", str(exc)
    except MetricError as exc:
        category, message = "metric", str(exc)
    except (OSError, json.JSONDecodeError) as exc:
        category, message = "io", str(exc)
    print(f"error: {category}: {message}".replace("\n", " "), file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
