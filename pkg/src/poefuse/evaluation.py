"""Cross-validated evaluation with subgroup breakdowns.

Protocol: stratified k-fold (default k=10) over the record labels; train on
k-1 folds, score the held-out fold, average the per-fold metrics.
Classification reports positive-class F1 and unweighted average recall,
regression reports RMSE and R-squared. Every metric is also computed on the
four subgroups (male, female, English, Chinese) of the held-out
predictions, and the report carries the absolute gaps between the language
and gender aggregates.

A metric can be undefined on a fold subgroup (empty subgroup, single-class
labels for UAR, constant targets for R-squared); such folds are excluded
from the mean and counted in ``undefined_counts``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import CLASS_MCI, LABEL_TO_INDEX
from .datamodel import FeatureRecord
from .poe import PoEConfig, build_bundle, predict_batch, train_classification, train_regression

SUBGROUP_COLUMNS = ("Avg.", "M", "F", "En", "Zh")
CLASSIFICATION_METRICS = ("f1", "uar")
REGRESSION_METRICS = ("rmse", "r2")


# ---------------------------------------------------------------------------
# Fold plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict[str, int]  # sample_id -> fold
    group_by_participant: bool
    seed: int

    def fold_of(self, rec: FeatureRecord) -> int:
        return self.assignment[rec.sample_id]

    def to_json_bytes(self) -> bytes:
        payload = {
            "k": self.k,
            "seed": self.seed,
            "group_by_participant": self.group_by_participant,
            "assignment": {sid: self.assignment[sid] for sid in sorted(self.assignment)},
        }
        return (json.dumps(payload) + "\n").encode("utf-8")


def _extra_quota_folds(totals: np.ndarray, extras: int) -> list[int]:
    """Folds that receive one extra sample: smallest running totals first,
    ties broken toward the lower fold index."""
    order = sorted(range(len(totals)), key=lambda f: (totals[f], f))
    return order[:extras]


def stratified_folds(records: Sequence[FeatureRecord], k: int = 10, seed: int = 0,
                     group_by_participant: bool = False) -> FoldPlan:
    """Label-stratified fold assignment, deterministic given the seed.

    Ungrouped, each fold's class counts are within 1 of n_class/k and fold
    sizes are as balanced as the class remainders allow. Grouped, all
    samples of a participant share a fold and stratification is best-effort
    at the participant level.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    labels_in_order = sorted({r.label for r in records})
    assignment: dict[str, int] = {}
    totals = np.zeros(k, dtype=int)

    if not group_by_participant:
        for label in labels_in_order:
            ids = [r.sample_id for r in records if r.label == label]
            if len(ids) < k:
                raise ValueError(
                    f"class {label!r} has {len(ids)} samples, fewer than k={k}"
                )
            base, extras = divmod(len(ids), k)
            quota = np.full(k, base, dtype=int)
            for f in _extra_quota_folds(totals, extras):
                quota[f] += 1
            shuffled = [ids[i] for i in rng.permutation(len(ids))]
            pos = 0
            for f in range(k):
                for sid in shuffled[pos:pos + quota[f]]:
                    assignment[sid] = f
                pos += quota[f]
            totals += quota
    else:
        by_participant: dict[str, list[FeatureRecord]] = {}
        for r in records:
            by_participant.setdefault(r.participant_id, []).append(r)
        if len(by_participant) < k:
            raise ValueError(
                f"{len(by_participant)} participants cannot fill k={k} folds"
            )
        # Majority label per participant, then greedy fill of the lightest fold.
        def majority_label(recs):
            counts = {}
            for r in recs:
                counts[r.label] = counts.get(r.label, 0) + 1
            return min(counts, key=lambda lab: (-counts[lab], lab))

        for label in labels_in_order:
            pids = [p for p in sorted(by_participant)
                    if majority_label(by_participant[p]) == label]
            shuffled = [pids[i] for i in rng.permutation(len(pids))]
            for pid in shuffled:
                f = int(np.lexsort((np.arange(k), totals))[0])
                for r in by_participant[pid]:
                    assignment[r.sample_id] = f
                totals[f] += len(by_participant[pid])

    return FoldPlan(k=k, assignment=assignment,
                    group_by_participant=group_by_participant, seed=seed)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def f1_score(preds, labels, positive: int = CLASS_MCI) -> float:
    """Positive-class F1: 2TP / (2TP + FP + FN), defined as 0 when the
    denominator vanishes."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have the same length")
    if preds.size == 0:
        raise ValueError("empty prediction set")
    tp = int(np.sum((preds == positive) & (labels == positive)))
    fp = int(np.sum((preds == positive) & (labels != positive)))
    fn = int(np.sum((preds != positive) & (labels == positive)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f1_score(preds, labels, classes=(0, 1)) -> float:
    return float(np.mean([f1_score(preds, labels, positive=c) for c in classes]))


def uar_score(preds, labels, classes=(0, 1)) -> float:
    """Unweighted average recall: mean of per-class recalls."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have the same length")
    recalls = []
    for c in classes:
        mask = labels == c
        if not np.any(mask):
            raise ValueError(f"class {c} absent from labels; UAR undefined")
        recalls.append(float(np.mean(preds[mask] == c)))
    return float(np.mean(recalls))


def rmse_r2(preds, targets) -> tuple[float, float | None]:
    """RMSE plus R-squared; R-squared is None when the targets are
    constant (zero total variance)."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise ValueError("preds and targets must be equal-length and nonempty")
    rmse = float(np.sqrt(np.mean((preds - targets) ** 2)))
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        return rmse, None
    ss_res = float(np.sum((preds - targets) ** 2))
    return rmse, 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# Cross validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CVConfig:
    poe: PoEConfig = field(default_factory=PoEConfig)
    k: int = 10
    group_by_participant: bool = False
    macro_f1: bool = False  # macro-averaged F1 instead of positive-class F1
    pooled: bool = False  # also report metrics over pooled fold predictions


@dataclass
class EvalReport:
    task: str
    k: int
    seed: int
    group_by_participant: bool
    metric_names: tuple[str, ...]
    per_fold: list[dict]
    aggregate: dict[str, dict[str, float | None]]
    disparity: dict[str, dict[str, float | None]]
    undefined_counts: dict[str, dict[str, int]]
    pooled: dict[str, dict[str, float | None]] | None = None

    def to_dict(self) -> dict:
        out = {
            "task": self.task,
            "k": self.k,
            "seed": self.seed,
            "group_by_participant": self.group_by_participant,
            "metric_names": list(self.metric_names),
            "per_fold": self.per_fold,
            "aggregate": self.aggregate,
            "disparity": self.disparity,
            "undefined_counts": self.undefined_counts,
        }
        if self.pooled is not None:
            out["pooled"] = self.pooled
        return out

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=2) + "\n").encode("utf-8")


def _subgroup_masks(records: Sequence[FeatureRecord]) -> dict[str, np.ndarray]:
    gender = np.array([r.gender for r in records])
    language = np.array([r.language for r in records])
    n = len(records)
    return {
        "Avg.": np.ones(n, dtype=bool),
        "M": gender == "m",
        "F": gender == "f",
        "En": language == "en",
        "Zh": language == "zh",
    }


def _classification_metrics(preds, labels, masks, use_macro_f1) -> dict:
    out = {}
    for metric in CLASSIFICATION_METRICS:
        vals = {}
        for col, mask in masks.items():
            if not np.any(mask):
                vals[col] = None
                continue
            p, y = preds[mask], labels[mask]
            if metric == "f1":
                vals[col] = macro_f1_score(p, y) if use_macro_f1 else f1_score(p, y)
            else:
                try:
                    vals[col] = uar_score(p, y)
                except ValueError:
                    vals[col] = None
        out[metric] = vals
    return out


def _regression_metrics(preds, targets, masks) -> dict:
    out = {"rmse": {}, "r2": {}}
    for col, mask in masks.items():
        if not np.any(mask):
            out["rmse"][col] = None
            out["r2"][col] = None
            continue
        rmse, r2 = rmse_r2(preds[mask], targets[mask])
        out["rmse"][col] = rmse
        out["r2"][col] = r2
    return out


def _run_fold(records: Sequence[FeatureRecord], plan: FoldPlan, fold: int,
              config: CVConfig) -> dict:
    train_recs = [r for r in records if plan.fold_of(r) != fold]
    val_recs = [r for r in records if plan.fold_of(r) == fold]
    d_s = train_recs[0].speech_vec.shape[0]
    d_t = train_recs[0].text_vec.shape[0]
    d_a = train_recs[0].acoustic_vec.shape[0]
    fold_seed = config.poe.seed ^ fold
    bundle = build_bundle(d_s, d_t, d_a, hidden_dim=config.poe.hidden_dim,
                          seed=fold_seed)
    cfg = config.poe.with_seed(fold_seed)
    masks = _subgroup_masks(val_recs)
    if config.poe.task == "classification":
        train_classification(bundle, train_recs, cfg)
        probs = predict_batch(bundle, val_recs, task="classification")
        preds = np.argmax(probs, axis=1)  # ties resolve to class 0 (MCI)
        labels = np.array([LABEL_TO_INDEX[r.label] for r in val_recs])
        metrics = _classification_metrics(preds, labels, masks, config.macro_f1)
        raw = {"preds": preds, "truth": labels}
    else:
        train_regression(bundle, train_recs, cfg)
        preds = predict_batch(bundle, val_recs, task="regression",
                              clamp_regression=config.poe.clamp_regression)
        targets = np.array([r.mmse for r in val_recs])
        metrics = _regression_metrics(preds, targets, masks)
        raw = {"preds": preds, "truth": targets}
    raw["masks"] = masks
    return {"fold": fold, "n_train": len(train_recs), "n_val": len(val_recs),
            "metrics": metrics, "_raw": raw}


def _run_fold_packed(args) -> dict:
    return _run_fold(*args)


def disparity_gap(aggregate: dict[str, dict[str, float | None]]
                  ) -> dict[str, dict[str, float | None]]:
    """Absolute aggregate differences |En - Zh| and |M - F| per metric."""
    gaps = {}
    for metric, vals in aggregate.items():
        def gap(a, b):
            if vals.get(a) is None or vals.get(b) is None:
                return None
            return abs(vals[a] - vals[b])
        gaps[metric] = {"language": gap("En", "Zh"), "gender": gap("M", "F")}
    return gaps


def cross_validate(records: Sequence[FeatureRecord], config: CVConfig,
                   jobs: int = 1) -> EvalReport:
    """Train and evaluate one model per fold; aggregate fold metrics by
    mean. Fully deterministic given the seed, independent of ``jobs``."""
    records = list(records)
    plan = stratified_folds(records, k=config.k, seed=config.poe.seed,
                            group_by_participant=config.group_by_participant)
    fold_args = [(records, plan, f, config) for f in range(config.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fold_results = list(pool.map(_run_fold_packed, fold_args))
    else:
        fold_results = [_run_fold(*args) for args in fold_args]

    metric_names = (CLASSIFICATION_METRICS if config.poe.task == "classification"
                    else REGRESSION_METRICS)
    aggregate: dict[str, dict[str, float | None]] = {}
    undefined: dict[str, dict[str, int]] = {}
    for metric in metric_names:
        aggregate[metric] = {}
        undefined[metric] = {}
        for col in SUBGROUP_COLUMNS:
            vals = [fr["metrics"][metric][col] for fr in fold_results]
            defined = [v for v in vals if v is not None]
            aggregate[metric][col] = float(np.mean(defined)) if defined else None
            undefined[metric][col] = len(vals) - len(defined)

    pooled = None
    if config.pooled:
        all_preds = np.concatenate([fr["_raw"]["preds"] for fr in fold_results])
        all_truth = np.concatenate([fr["_raw"]["truth"] for fr in fold_results])
        all_masks = {col: np.concatenate([fr["_raw"]["masks"][col]
                                          for fr in fold_results])
                     for col in SUBGROUP_COLUMNS}
        if config.poe.task == "classification":
            pooled = _classification_metrics(all_preds, all_truth, all_masks,
                                             config.macro_f1)
        else:
            pooled = _regression_metrics(all_preds, all_truth, all_masks)

    per_fold = [{k: v for k, v in fr.items() if k != "_raw"} for fr in fold_results]
    return EvalReport(
        task=config.poe.task,
        k=config.k,
        seed=config.poe.seed,
        group_by_participant=config.group_by_participant,
        metric_names=tuple(metric_names),
        per_fold=per_fold,
        aggregate=aggregate,
        disparity=disparity_gap(aggregate),
        undefined_counts=undefined,
        pooled=pooled,
    )


# ---------------------------------------------------------------------------
# Plain-text rendering
# ---------------------------------------------------------------------------

def _fmt(metric: str, value: float | None) -> str:
    if value is None:
        return "--"
    if metric in ("f1", "uar"):
        return f"{100.0 * value:.1f}"  # percent, like the usual reporting
    return f"{value:.2f}"


def render_report(report: EvalReport) -> str:
    """Aligned table with the subgroup column order Avg., M, F, En, Zh."""
    width = 8
    lines = [f"task: {report.task}   k={report.k}   seed={report.seed}"]
    header = f"{'metric':<8}" + "".join(f"{c:>{width}}" for c in SUBGROUP_COLUMNS)
    lines.append(header)
    for metric in report.metric_names:
        row = f"{metric.upper():<8}" + "".join(
            f"{_fmt(metric, report.aggregate[metric][c]):>{width}}"
            for c in SUBGROUP_COLUMNS)
        lines.append(row)
    for metric in report.metric_names:
        gaps = report.disparity[metric]
        lines.append(
            f"gap {metric.upper():<5}language {_fmt(metric, gaps['language'])}"
            f"   gender {_fmt(metric, gaps['gender'])}"
        )
    total_undefined = sum(sum(cols.values()) for cols in report.undefined_counts.values())
    if total_undefined:
        lines.append(f"undefined fold metrics excluded from means: {total_undefined}")
    return "\n".join(lines) + "\n"
