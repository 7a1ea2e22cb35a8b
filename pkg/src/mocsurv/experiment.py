"""Cross-validated training and evaluation runs, with on-disk run directories.

Run directory layout::

    run_config.json            resolved configuration
    fold{i}/checkpoint.mock    final training state (theta_Z, theta_A/B, moments)
    fold{i}/checkpoint.mock.json
    fold{i}/train_log.csv      one line per accumulation window
    fold{i}/split.json         train / validation ids
    report.txt, folds.csv, risk.csv, km.csv   written by ``evaluate_run``
"""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import Cohort, build_pairs, kfold_split
from .metrics import KMCurve, c_index, km_curve, logrank_test, median_split
from .predictors import BatchPredictor, CheckpointError, ModelDims, load_params
from .autodiff import ParamSet
from .trainer import TRAIN_LOG_HEADER, TrainConfig, Trainer, save_checkpoint

log = logging.getLogger(__name__)


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def model_dims(cohort: Cohort, model: dict | None = None) -> ModelDims:
    model = dict(model or {})
    return ModelDims(d_p=cohort.d_p, d_g=cohort.d_g, **model)


@dataclass
class FoldResult:
    fold: int
    train_ids: list[str]
    val_ids: list[str]
    theta: ParamSet
    dims: ModelDims
    n_pairs: int


class FoldIsolationError(RuntimeError):
    pass


class FoldError(RuntimeError):
    def __init__(self, fold: int, exc: Exception):
        self.fold = fold
        self.cause = exc
        super().__init__(f"fold {fold}: {exc}")


def audit_fold(pairs, val_ids) -> None:
    val = set(val_ids)
    leaked = sorted({i for p in pairs for i in (p.higher_id, p.lower_id) if i in val})
    if leaked:
        raise FoldIsolationError(f"validation ids used in training pairs: {leaked[:5]}")


def train_folds(cohort: Cohort, cfg: TrainConfig, k: int = 5, split_seed: int | None = None,
                model: dict | None = None, out_dir=None) -> list[FoldResult]:
    """k-fold training with pairs built inside each training fold only."""
    split_seed = cfg.seed if split_seed is None else split_seed
    dims = model_dims(cohort, model)
    out = Path(out_dir) if out_dir is not None else None
    results = []
    for fold, (train_ids, val_ids) in enumerate(kfold_split(cohort, k, split_seed)):
        train_cohort = cohort.subset(train_ids)
        pairs = build_pairs(train_cohort)
        audit_fold(pairs, val_ids)
        lines = [TRAIN_LOG_HEADER]
        try:
            trainer = Trainer(train_cohort, pairs, cfg, dims, log_line=lines.append)
            state = trainer.run()
        except Exception as exc:
            raise FoldError(fold, exc) from exc
        log.info("fold %d: %d pairs, %d windows", fold, len(pairs), state.windows_done)
        if out is not None:
            fdir = out / f"fold{fold}"
            fdir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state, fdir / "checkpoint.mock")
            (fdir / "checkpoint.mock.json").write_text(
                json.dumps({"dims": dims.to_dict(), "n_params": state.theta_Z.size,
                            "epochs": state.epoch, "windows": state.windows_done},
                           indent=2, sort_keys=True) + "\n")
            (fdir / "train_log.csv").write_text("\n".join(lines) + "\n")
            (fdir / "split.json").write_text(json.dumps({"train": train_ids, "val": val_ids}, indent=1) + "\n")
        results.append(FoldResult(fold, train_ids, val_ids, state.theta_Z, dims, len(pairs)))
    return results


def write_run_config(out_dir, config: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_run(run_dir) -> tuple[dict, list[FoldResult]]:
    run = Path(run_dir)
    config = json.loads((run / "run_config.json").read_text())
    folds = []
    for fold in range(config["k"]):
        fdir = run / f"fold{fold}"
        split = json.loads((fdir / "split.json").read_text())
        theta, dims = load_params(fdir / "checkpoint.mock")
        folds.append(FoldResult(fold, split["train"], split["val"], theta, dims, -1))
    return config, folds


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class RunReport:
    fold_cindex: list[float]
    logrank_statistic: float
    logrank_p: float
    n_high: int
    n_low: int
    config: dict = field(default_factory=dict)
    version: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_cindex))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_cindex))

    def to_text(self) -> str:
        lines = [
            "[report]",
            f"version = {self.version}",
            f"folds = {len(self.fold_cindex)}",
        ]
        for i, c in enumerate(self.fold_cindex):
            lines.append(f"fold{i}_c_index = {c!r}")
        lines += [
            f"c_index_mean = {self.mean!r}",
            f"c_index_std = {self.std!r}",
            f"logrank_statistic = {self.logrank_statistic!r}",
            f"logrank_p = {self.logrank_p!r}",
            f"n_high = {self.n_high}",
            f"n_low = {self.n_low}",
            "",
            "[config]",
        ]
        lines += [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"


def fold_risks(cohort: Cohort, folds: list[FoldResult], loss_mode: str = "moc") -> dict[str, dict]:
    """Validation predictions per id: fold, p, g and the score used for ranking."""
    out = {}
    for f in folds:
        if f.dims.d_p != cohort.d_p or f.dims.d_g != cohort.d_g:
            raise CheckpointError(
                f"fold {f.fold} checkpoint expects d_p={f.dims.d_p}, d_g={f.dims.d_g}; "
                f"data has d_p={cohort.d_p}, d_g={cohort.d_g}")
        pred = BatchPredictor(f.dims)(f.theta, cohort.features, f.val_ids)
        score = {"oc_unimodal_path": pred["p"], "oc_unimodal_gene": pred["g"]}.get(loss_mode, pred["r"])
        for j, pid in enumerate(f.val_ids):
            out[pid] = {"fold": f.fold, "p": float(pred["p"][j]), "g": float(pred["g"][j]),
                        "risk": float(score[j])}
    return out


def oracle_risks(cohort: Cohort, folds) -> dict[str, dict]:
    if cohort.latent is None:
        raise ValueError("cohort has no latent sidecar")
    return {pid: {"fold": fold, "p": float("nan"), "g": float("nan"), "risk": cohort.latent[pid]}
            for fold, (_, val) in enumerate(folds) for pid in val}


@dataclass
class Evaluation:
    report: RunReport
    risks: dict[str, dict]
    curves: dict[str, KMCurve]
    groups: dict[str, list[str]]


def evaluate(cohort: Cohort, val_sets: list[list[str]], risks: dict[str, dict],
             config: dict | None = None) -> Evaluation:
    per_fold = []
    for val in val_sets:
        recs = [cohort.record(i) for i in val]
        per_fold.append(c_index(recs, {i: risks[i]["risk"] for i in val}))
    pooled = [i for val in val_sets for i in val]
    high, low = median_split(pooled, {i: risks[i]["risk"] for i in pooled})
    ga = [cohort.record(i) for i in high]
    gb = [cohort.record(i) for i in low]
    lr = logrank_test(ga, gb)
    report = RunReport(per_fold, lr.statistic, lr.p_value, len(high), len(low),
                       dict(config or {}), version_string())
    return Evaluation(report, risks, {"high": km_curve(ga), "low": km_curve(gb)},
                      {"high": high, "low": low})


def km_rows(curves: dict[str, KMCurve], groups: dict[str, list]) -> list[str]:
    rows = ["time,survival,at_risk,events,group"]
    for name, curve in curves.items():
        rows.append(f"0,1.0,{len(groups[name])},0,{name}")
        for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events):
            rows.append(f"{float(t)!r},{float(s)!r},{int(n)},{int(d)},{name}")
    return rows


def write_evaluation(ev: Evaluation, cohort: Cohort, out_dir, plot: bool = True, prefix: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{prefix}report.txt").write_text(ev.report.to_text())
    folds = ["fold,n_val,c_index"] + [
        f"{i},{sum(1 for r in ev.risks.values() if r['fold'] == i)},{c!r}"
        for i, c in enumerate(ev.report.fold_cindex)
    ]
    (out / f"{prefix}folds.csv").write_text("\n".join(folds) + "\n")
    risk = ["id,fold,p,g,risk"] + [
        f"{pid},{r['fold']},{r['p']!r},{r['g']!r},{r['risk']!r}" for pid, r in sorted(ev.risks.items())
    ]
    (out / f"{prefix}risk.csv").write_text("\n".join(risk) + "\n")
    (out / f"{prefix}km.csv").write_text("\n".join(km_rows(ev.curves, ev.groups)) + "\n")
    if plot:
        from .plotting import plot_fold_cindex, plot_km

        censored = {g: [cohort.record(i).time for i in ids if not cohort.record(i).event]
                    for g, ids in ev.groups.items()}
        plot_km(ev.curves, out / f"{prefix}km.svg", ev.report.logrank_p, censor_marks=censored)
        plot_fold_cindex(ev.report.fold_cindex, out / f"{prefix}folds.svg")



def evaluate_run(run_dir, cohort: Cohort, oracle: bool = False, plot: bool = True) -> Evaluation:
    """Evaluate every fold checkpoint of a run directory and write the report files."""
    config, folds = load_run(run_dir)
    if oracle:
        risks = oracle_risks(cohort, [(f.train_ids, f.val_ids) for f in folds])
    else:
        risks = fold_risks(cohort, folds, config.get("train", {}).get("loss_mode", "moc"))
    echo = dict(config)
    echo["score"] = "latent_oracle" if oracle else "model"
    ev = evaluate(cohort, [f.val_ids for f in folds], risks, echo)
    write_evaluation(ev, cohort, run_dir, plot=plot, prefix="oracle_" if oracle else "")
    return ev
