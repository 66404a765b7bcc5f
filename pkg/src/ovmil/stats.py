"""Classification metrics, bootstrap intervals, paired t-tests, BH-FDR and linear fits."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import numpy as np
from scipy import special, stats as sps

from .features import NUM_CLASSES, SubtypeLabel


class MetricError(ValueError):
    pass


class DegenerateDatasetError(MetricError):
    pass


@dataclass(eq=False)
class PredictionSet:
    """Per-slide true labels and class probabilities; predictions are the argmax."""

    y_true: np.ndarray
    probs: np.ndarray
    slide_ids: tuple = ()

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=int)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or len(self.y_true) != len(self.probs):
            raise MetricError("probs must be n x K with one row per true label")
        if len(self.y_true) == 0:
            raise MetricError("empty prediction set")
        if self.y_true.min() < 0 or self.y_true.max() >= self.n_classes:
            raise MetricError("true label outside the probability columns")
        self.slide_ids = tuple(self.slide_ids)

    @property
    def n_classes(self):
        return self.probs.shape[1]

    @property
    def y_pred(self):
        return self.probs.argmax(axis=1)

    def __len__(self):
        return len(self.y_true)

    def subset(self, index):
        ids = tuple(self.slide_ids[i] for i in index) if self.slide_ids else ()
        return PredictionSet(self.y_true[index], self.probs[index], ids)


def _require_all_classes(preds):
    present = np.bincount(preds.y_true, minlength=preds.n_classes)
    missing = np.flatnonzero(present == 0)
    if missing.size:
        raise MetricError(f"classes {missing.tolist()} have no true examples")
    return present


def confusion_matrix(y_true, y_pred, k):
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def balanced_accuracy(preds):
    present = _require_all_classes(preds)
    cm = confusion_matrix(preds.y_true, preds.y_pred, preds.n_classes)
    return float(np.mean(np.diag(cm) / present))


def macro_f1(preds):
    _require_all_classes(preds)
    cm = confusion_matrix(preds.y_true, preds.y_pred, preds.n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def accuracy(preds):
    return float(np.mean(preds.y_true == preds.y_pred))


def binary_auroc(scores, positive):
    """Mann-Whitney AUROC with ties counted one half."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    ranks = sps.rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auroc(preds):
    return float(np.mean([
        binary_auroc(preds.probs[:, c], preds.y_true == c) for c in range(preds.n_classes)
    ]))


METRICS = {
    "balanced_accuracy": balanced_accuracy,
    "macro_auroc": macro_auroc,
    "macro_f1": macro_f1,
}


def get_metric(metric):
    if callable(metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise MetricError(f"unknown metric {metric!r}") from None


@dataclass(frozen=True)
class BootstrapEstimate:
    metric: str
    point: float
    boot_mean: float
    ci_low: float
    ci_high: float
    iterations: int
    seed: int
    method: str = "percentile"


def _iteration_rng(seed, i):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))


def _resample_index(y_true, n_classes_present, rng, max_retries, i):
    n = len(y_true)
    for _ in range(max_retries + 1):
        idx = rng.integers(0, n, size=n)
        if len(np.unique(y_true[idx])) == n_classes_present:
            return idx
    raise DegenerateDatasetError(
        f"bootstrap iteration {i}: no resample kept every class in {max_retries} retries"
    )


def _bootstrap_chunk(job):
    y_true, probs, metrics, seed, start, stop, max_retries = job
    fns = [get_metric(m) for m in metrics]
    n_present = len(np.unique(y_true))
    out = np.empty((stop - start, len(fns)))
    for row, i in enumerate(range(start, stop)):
        idx = _resample_index(y_true, n_present, _iteration_rng(seed, i), max_retries, i)
        sample = PredictionSet(y_true[idx], probs[idx])
        out[row] = [fn(sample) for fn in fns]
    return out


def bootstrap_samples(preds, metrics, iterations=10_000, seed=0, max_retries=1000, workers=1):
    """Metric values on each resample, shape (iterations, len(metrics)).

    Resample i draws from its own generator seeded by (seed, i), so the output
    does not depend on how iterations are split across workers. Resamples that
    lose a true class are redrawn.
    """
    if isinstance(metrics, str) or callable(metrics):
        metrics = [metrics]
    n_chunks = max(1, min(workers, iterations))
    bounds = np.linspace(0, iterations, n_chunks + 1).astype(int)
    jobs = [(preds.y_true, preds.probs, list(metrics), seed, a, b, max_retries)
            for a, b in zip(bounds[:-1], bounds[1:])]
    if n_chunks == 1:
        parts = [_bootstrap_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_chunks) as pool:
            parts = list(pool.map(_bootstrap_chunk, jobs))
    return np.concatenate(parts)


def _estimate(name, point, values, iterations, seed):
    lo, hi = np.percentile(values, [2.5, 97.5])
    mean = float(values.mean())
    # a very skewed resampling distribution can put its mean outside the percentile band
    return BootstrapEstimate(
        name, point, mean, float(min(lo, mean)), float(max(hi, mean)), iterations, seed
    )


def bootstrap_report(preds, metric, iterations=10_000, seed=0, max_retries=1000, workers=1):
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    fn = get_metric(metric)
    name = metric if isinstance(metric, str) else getattr(metric, "__name__", "metric")
    values = bootstrap_samples(preds, [metric], iterations, seed, max_retries, workers)[:, 0]
    return _estimate(name, fn(preds), values, iterations, seed)


def metric_report(preds, iterations=10_000, seed=0, metrics=tuple(METRICS), workers=1,
                  max_retries=1000):
    """Bootstrap estimates for several metrics sharing the same resamples."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    values = bootstrap_samples(preds, list(metrics), iterations, seed, max_retries, workers)
    return [_estimate(m, get_metric(m)(preds), values[:, j], iterations, seed)
            for j, m in enumerate(metrics)]


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def t_sf_two_sided(t, df):
    """Two-sided tail probability of Student's t via the regularised incomplete beta."""
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = len(d)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    mean = d.mean()
    sd = d.std(ddof=1)
    scale = max(np.abs(np.asarray(a, float)).max(), np.abs(np.asarray(b, float)).max(), 1.0)
    if sd <= 1e-15 * scale:
        if abs(mean) <= 1e-15 * scale:
            return TTestResult(0.0, 1.0, n - 1, True)
        return TTestResult(float(np.sign(mean) * np.inf), 0.0, n - 1, True)
    t = float(mean / (sd / np.sqrt(n)))
    return TTestResult(t, t_sf_two_sided(t, n - 1), n - 1)


def bh_fdr(pvals):
    """Benjamini-Hochberg adjusted p-values, returned in input order."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("expected a 1-D list of p-values")
    if np.any((p < 0) | (p > 1)) or np.isnan(p).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    out = np.empty(m)
    out[order] = adjusted
    return out


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


def fit_linear_r2(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need at least two paired points")
    xc = x - x.mean()
    sxx = xc @ xc
    if sxx <= 1e-12 * max(1.0, float(np.abs(x).max()) ** 2) * len(x):
        raise ValueError("x is constant; the fit is singular")
    yc = y - y.mean()
    slope = (xc @ yc) / sxx
    intercept = y.mean() - slope * x.mean()
    ss_tot = yc @ yc
    ss_res = float(((y - (slope * x + intercept)) ** 2).sum())
    r2 = 0.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LinearFit(float(slope), float(intercept), float(min(max(r2, 0.0), 1.0)))


# -- CSV interfaces ---------------------------------------------------------

def _label_code(text):
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    return int(SubtypeLabel.parse(text))


def write_predictions(path, slide_ids, y_true, probs):
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "true_label", *[f"p{c}" for c in range(k)], "predicted"])
        for sid, y, row in zip(slide_ids, y_true, probs):
            w.writerow([sid, _label_name(y, k), *[repr(float(v)) for v in row],
                        _label_name(int(row.argmax()), k)])


def _label_name(code, k):
    return SubtypeLabel(int(code)).name if k == NUM_CLASSES else str(int(code))


def read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MetricError(f"{path}: no predictions")
    k = sum(1 for c in rows[0] if c.startswith("p") and c[1:].isdigit())
    probs = [[float(r[f"p{c}"]) for c in range(k)] for r in rows]
    return PredictionSet(
        [_label_code(r["true_label"]) for r in rows], probs, [r["slide_id"] for r in rows]
    )


def write_report(path, estimates):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "point", "boot_mean", "ci_low", "ci_high"])
        for e in estimates:
            w.writerow([e.metric, repr(e.point), repr(e.boot_mean), repr(e.ci_low), repr(e.ci_high)])


def read_report(path):
    with open(path, newline="") as fh:
        return {r["metric"]: {k: float(v) for k, v in r.items() if k != "metric"}
                for r in csv.DictReader(fh)}


def write_comparison(path, rows):
    """rows: iterables of (pair, metric, t, p_raw, p_adjusted)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "metric", "t", "p_raw", "p_adjusted"])
        for pair, metric, t, p_raw, p_adj in rows:
            w.writerow([pair, metric, repr(float(t)), repr(float(p_raw)), repr(float(p_adj))])


def compare_folds(per_fold, metric_names, baseline=None):
    """Paired t-tests of every run against ``baseline`` (first run by default) with BH-FDR
    applied across all tests. ``per_fold`` maps run name -> {metric: [fold values]}."""
    names = list(per_fold)
    baseline = baseline or names[0]
    tests = []
    for other in names:
        if other == baseline:
            continue
        for metric in metric_names:
            res = paired_t_test(per_fold[other][metric], per_fold[baseline][metric])
            tests.append((f"{other} vs {baseline}", metric, res.t, res.p))
    adjusted = bh_fdr([p for *_, p in tests]) if tests else []
    return [(*row, q) for row, q in zip(tests, adjusted)]
