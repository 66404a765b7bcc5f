"""Case-level stratified cross-validation, ensembling, grid-search tuning and run directories."""
from __future__ import annotations

import csv
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .abmil import (
    DivergenceError,
    ShapeError,
    best_val_loss,
    forward,
    predict_proba,
    train_fold,
    write_checkpoint,
    write_history,
)
from .config import HYPERPARAMETERS, TrainConfig, parse_value, read_kv, write_kv
from .features import load_bags
from .stats import write_predictions

log = logging.getLogger(__name__)

N_FOLDS = 5


class StratificationError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint32)[0])


def parallel_map(fn, items, workers=1):
    """Ordered map; a process pool only when workers > 1. Results never depend on workers."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# -- folds ------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_cases: frozenset
    val_cases: frozenset
    test_cases: frozenset

    def role(self, case_id):
        for name in ("train", "val", "test"):
            if case_id in getattr(self, f"{name}_cases"):
                return name
        raise KeyError(case_id)


def case_labels(records):
    out = {}
    for r in records:
        out.setdefault(r.case_id, int(r.label))
    return out


def stratified_case_kfold(records, k=N_FOLDS, seed=0):
    """Fold i tests on group i and validates on group (i + 1) mod k.

    Cases of each class are shuffled and dealt round-robin into k groups, the
    dealing position carrying over between classes so group sizes stay within one.
    """
    labels = case_labels(records)
    groups = [[] for _ in range(k)]
    rng = np.random.default_rng(seed)
    position = 0
    for c in sorted(set(labels.values())):
        cases = sorted(cid for cid, y in labels.items() if y == c)
        if len(cases) < k:
            raise StratificationError(f"class {c} has {len(cases)} cases, fewer than k={k}")
        for cid in rng.permutation(cases):
            groups[position % k].append(str(cid))
            position += 1
    folds = []
    for i in range(k):
        test = frozenset(groups[i])
        val = frozenset(groups[(i + 1) % k])
        train = frozenset(c for j, g in enumerate(groups) if j not in (i, (i + 1) % k) for c in g)
        folds.append(FoldSplit(i, train, val, test))
    return folds


def split_indices(records, fold):
    out = {"train": [], "val": [], "test": []}
    for i, r in enumerate(records):
        out[fold.role(r.case_id)].append(i)
    return out


def write_folds(folds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "case_id", "split"])
        for f in folds:
            for split in ("train", "val", "test"):
                for cid in sorted(getattr(f, f"{split}_cases")):
                    w.writerow([f.fold_index, cid, split])


# -- ensembling -------------------------------------------------------------

def model_proba(params, features):
    logits, _, _ = forward(features, params)
    return predict_proba(logits)


def ensemble_predict(models, features):
    """Mean of member probabilities and its argmax (ties go to the lowest class)."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    shapes = {(m.shape[0], m.shape[3]) for m in models}
    if len(shapes) != 1:
        raise ShapeError(f"ensemble members disagree on (dim, K): {sorted(shapes)}")
    probs = np.mean([model_proba(m, features) for m in models], axis=0)
    return probs, int(np.argmax(probs))


def ensemble_attention(models, features):
    return np.mean([forward(features, m)[1] for m in models], axis=0)


# -- tuning -----------------------------------------------------------------

@dataclass(frozen=True)
class TuningIteration:
    index: int
    names: tuple


@dataclass(frozen=True)
class TuningSchedule:
    iterations: tuple
    grids: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.iterations:
            raise ScheduleError("schedule has no iterations")
        for it in self.iterations:
            if not 1 <= len(it.names) <= 6:
                raise ScheduleError(f"iteration {it.index} activates {len(it.names)} hyperparameters")
            for name in it.names:
                if name not in HYPERPARAMETERS:
                    raise ScheduleError(f"iteration {it.index}: unknown hyperparameter {name!r}")
                if name not in self.grids or not self.grids[name]:
                    raise ScheduleError(f"no candidate grid for {name!r}")

    def configurations(self, iteration, current):
        values = [self.grids[n] for n in iteration.names]
        return [current.replace(**dict(zip(iteration.names, combo)))
                for combo in itertools.product(*values)]


def _data_path(name):
    return resources.files("ovmil") / "data" / name


def read_grids(path):
    grids = {}
    for name, text in read_kv(path).items():
        if name not in HYPERPARAMETERS:
            raise ScheduleError(f"grid for unknown hyperparameter {name!r}")
        grids[name] = tuple(parse_value(name, tok) for tok in text.split())
    return grids


def load_schedule(path=None, grids=None):
    path = path or _data_path("tuning_schedule.csv")
    if grids is None or isinstance(grids, (str, os.PathLike)):
        grids = read_grids(grids or _data_path("tuning_grids.kv"))
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    iterations = tuple(
        TuningIteration(int(r["iteration"]), tuple(n.strip() for n in r["hyperparameters"].split(";") if n.strip()))
        for r in rows
    )
    return TuningSchedule(iterations, dict(grids))


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    config: TrainConfig
    active: tuple
    loss: float
    selected: bool


def run_tuning(schedule, scorer, base_config):
    """Iterative grid search; ``scorer(config) -> mean validation loss``.

    Each iteration evaluates the grid over its active hyperparameters with the
    rest frozen at the current best, then carries the argmin forward (first in
    grid order on ties). Failed configurations score +inf.
    """
    current = base_config
    trace = []
    seen = {}
    for it in schedule.iterations:
        configs = schedule.configurations(it, current)
        losses = []
        for cfg in configs:
            key = tuple(sorted(cfg.to_kv().items()))
            if key not in seen:
                try:
                    loss = float(scorer(cfg))
                except (DivergenceError, FloatingPointError, ArithmeticError) as exc:
                    log.warning("configuration failed: %s", exc)
                    loss = np.inf
                seen[key] = loss if np.isfinite(loss) else np.inf
            losses.append(seen[key])
        best = int(np.argmin(losses)) if np.isfinite(losses).any() else None
        for j, (cfg, loss) in enumerate(zip(configs, losses)):
            trace.append(TraceEntry(it.index, cfg, it.names, loss, j == best))
        if best is not None:
            current = configs[best]
        log.info("tuning iteration %d: %d configs, best loss %s", it.index, len(configs),
                 losses[best] if best is not None else "inf")
    return current, trace


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "active", "values", "mean_val_loss", "selected"])
        for e in trace:
            kv = e.config.to_kv()
            w.writerow([e.iteration, ";".join(e.active),
                        ";".join(f"{n}={kv[n]}" for n in e.active), repr(e.loss), int(e.selected)])


def iteration_best_losses(trace):
    best = {}
    for e in trace:
        if e.selected:
            best[e.iteration] = e.loss
    return [best[i] for i in sorted(best)]


# -- cross-validated training -------------------------------------------------

def _fold_job(job):
    train, val, cfg = job
    return train_fold(train, val, cfg)


@dataclass
class CrossValidation:
    """Feature bags bound to their fold splits; scores configurations by mean fold val loss."""

    records: list
    bags: list
    folds: list
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.labels = [int(r.label) for r in self.records]
        self._splits = [split_indices(self.records, f) for f in self.folds]

    @classmethod
    def from_records(cls, records, seed=0, workers=1, k=N_FOLDS):
        return cls(records, load_bags(records), stratified_case_kfold(records, k, seed), seed, workers)

    def pairs(self, indices):
        return [(self.bags[i].features, self.labels[i]) for i in indices]

    def fold_config(self, config, fold_index):
        return config.replace(seed=derive_seed(self.seed, config.seed, fold_index))

    def train_all(self, config):
        jobs = [
            (self.pairs(s["train"]), self.pairs(s["val"]), self.fold_config(config, f.fold_index))
            for f, s in zip(self.folds, self._splits)
        ]
        return parallel_map(_fold_job, jobs, self.workers)

    def __call__(self, config):
        results = self.train_all(config)
        return float(np.mean([best_val_loss(h) for _, h in results]))


@dataclass
class ExperimentResult:
    models: list
    histories: list
    fold_predictions: list      # (slide_ids, y_true, probs) per fold test split
    holdout_predictions: dict   # name -> (slide_ids, y_true, probs)


def run_experiment(records, config, seed=0, out_dir=None, holdouts=None, workers=1):
    """Train the fold models, predict each fold's test split and ensemble any hold-outs.

    Hold-out bags are read and checked against the training dim before training.
    """
    cv = CrossValidation.from_records(records, seed, workers)
    dim = cv.bags[0].dim
    holdout_bags = {}
    for name, recs in (holdouts or {}).items():
        bags = load_bags(recs)
        if bags and bags[0].dim != dim:
            raise ShapeError(f"hold-out {name!r} has feature dim {bags[0].dim}, training uses {dim}")
        holdout_bags[name] = (recs, bags)

    results = cv.train_all(config)
    models = [p for p, _ in results]
    histories = [h for _, h in results]

    fold_preds = []
    for model, split in zip(models, cv._splits):
        idx = split["test"]
        probs = np.array([model_proba(model, cv.bags[i].features) for i in idx])
        fold_preds.append(([records[i].slide_id for i in idx], [cv.labels[i] for i in idx], probs))

    holdout_preds = {}
    for name, (recs, bags) in holdout_bags.items():
        probs = np.array([ensemble_predict(models, b.features)[0] for b in bags])
        holdout_preds[name] = ([r.slide_id for r in recs], [int(r.label) for r in recs], probs)

    result = ExperimentResult(models, histories, fold_preds, holdout_preds)
    if out_dir is not None:
        write_run(out_dir, result, cv.folds, config, seed)
    return result


def write_run(out_dir, result, folds, config, seed):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_kv({"seed": str(seed), **config.to_kv()}, out / "config.kv")
    write_folds(folds, out / "folds.csv")
    all_ids, all_y, all_p = [], [], []
    for i, (model, hist, (ids, y, p)) in enumerate(
        zip(result.models, result.histories, result.fold_predictions)
    ):
        fdir = out / f"fold{i}"
        fdir.mkdir(exist_ok=True)
        write_checkpoint(fdir / "checkpoint.abml", model, config)
        write_history(hist, fdir / "history.csv")
        write_predictions(fdir / "predictions_test.csv", ids, y, p)
        all_ids += ids
        all_y += y
        all_p.append(p)
    write_predictions(out / "predictions_test.csv", all_ids, all_y, np.concatenate(all_p))
    for name, (ids, y, p) in result.holdout_predictions.items():
        write_predictions(out / f"predictions_{name}.csv", ids, y, p)


def read_run_config(path):
    kv = read_kv(path)
    seed = int(kv.pop("seed", 0))
    return TrainConfig.from_kv(kv), seed

