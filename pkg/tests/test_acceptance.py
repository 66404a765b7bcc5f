"""End-to-end acceptance checks, one test per criterion."""
import time

import numpy as np
import pytest

from conftest import he_like_tile, render_od, stain_pair, two_stain_concentrations
from oracles import (
    angle_deg,
    auroc_pairs,
    balanced_accuracy_loop,
    bh_step_up,
    finite_difference_check,
    macro_auroc_pairs,
    macro_f1_loop,
    otsu_exhaustive,
    t_two_sided_quad,
)
from ovmil.abmil import init_params
from ovmil.cli import EXIT_OK, main
from ovmil.config import HYPERPARAMETERS, TrainConfig, get_preset
from ovmil.orchestrate import (
    TuningIteration,
    TuningSchedule,
    ensemble_attention,
    ensemble_predict,
    load_schedule,
    model_proba,
    run_experiment,
    run_tuning,
)
from ovmil.preprocess import LabStats, macenko_analyse, otsu_threshold, reinhard_normalise
from ovmil.stats import (
    PredictionSet,
    accuracy,
    balanced_accuracy,
    bh_fdr,
    binary_auroc,
    bootstrap_report,
    macro_auroc,
    macro_f1,
    paired_t_test,
)
from ovmil.synthetic import class_directions, make_signal_bags, write_dataset


def test_criterion_01_gradients(criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = max(finite_difference_check(rng) for _ in range(100))
    elapsed = time.perf_counter() - start
    criterion(1, worst < 1e-4 and elapsed < 30,
              f"max relative gradient error {worst:.2e} over 100 instances in {elapsed:.1f}s")


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    start = time.perf_counter()
    directions = class_directions(64, seed=0)
    train = make_signal_bags(500, dim=64, seed=0, directions=directions, prefix="t")
    hold = make_signal_bags(100, dim=64, seed=1, directions=directions, prefix="h")
    records = write_dataset(train, root / "train")
    hold_records = write_dataset(hold, root / "hold", cohort="holdout")
    config = get_preset("rn50").replace(learning_rate=1e-3, model_size=(64, 32), max_epochs=50)
    result = run_experiment(records, config, seed=0, holdouts={"holdout": hold_records}, workers=1)
    return result, hold, time.perf_counter() - start


def test_criterion_02_synthetic_mil(synthetic_run, criterion):
    start = time.perf_counter()
    result, hold, train_seconds = synthetic_run
    _, y_true, probs = result.holdout_predictions["holdout"]
    preds = PredictionSet(y_true, probs)
    bacc = balanced_accuracy(preds)
    correct = preds.y_pred == preds.y_true
    wins = []
    for bag, ok in zip(hold, correct):
        if ok:
            att = ensemble_attention(result.models, bag.features)
            wins.append(att[bag.signal].mean() > att[~bag.signal].mean())
    attention_rate = float(np.mean(wins))
    elapsed = train_seconds + time.perf_counter() - start
    criterion(2, bacc >= 0.95 and attention_rate >= 0.9 and elapsed < 300,
              f"hold-out balanced accuracy {bacc:.3f}, signal attention wins {attention_rate:.1%} "
              f"of {len(wins)} correct bags, {elapsed:.0f}s")


def test_synthetic_validation_loss(synthetic_run):
    result, _, _ = synthetic_run
    best = [min(r.val_loss for r in h) for h in result.histories]
    print(f"best validation loss per fold: {', '.join(f'{b:.3f}' for b in best)}")
    assert all(len(h) == 50 for h in result.histories)
    assert np.mean(best) < 0.1


def test_criterion_03_metric_oracles(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(5, 51))
        y = np.concatenate([np.arange(5), rng.integers(0, 5, n - 5)])
        rng.shuffle(y)
        probs = rng.dirichlet(np.ones(5), size=n)
        if i % 2:
            probs = np.round(probs * 5) / 5  # coarse scores force ties
        preds = PredictionSet(y, probs)
        yl, pl = y.tolist(), preds.y_pred.tolist()
        worst = max(worst,
                    abs(balanced_accuracy(preds) - balanced_accuracy_loop(yl, pl, 5)),
                    abs(macro_f1(preds) - macro_f1_loop(yl, pl, 5)),
                    abs(macro_auroc(preds) - macro_auroc_pairs(yl, probs.tolist(), 5)))
    exact = True
    for _ in range(200):
        scores = rng.integers(0, 4, size=12).tolist()
        pos = [1, 0] + rng.integers(0, 2, size=10).tolist()
        exact &= binary_auroc(scores, pos) == float(auroc_pairs(scores, pos))
    criterion(3, worst <= 1e-10 and exact,
              f"max metric deviation {worst:.1e} over 1000 sets; tied AUROC exact: {exact}")


def test_criterion_04_otsu(criterion):
    rng = np.random.default_rng(4)
    mismatches = 0
    for i in range(1000):
        hist = np.zeros(256, dtype=np.int64)
        kind = i % 4
        if kind == 0:
            hist[:] = rng.integers(0, 1000, 256)
        elif kind == 1:
            bins = rng.choice(256, size=int(rng.integers(2, 12)), replace=False)
            hist[bins] = rng.integers(1, 50, size=len(bins))
        elif kind == 2:
            bins = rng.choice(256, size=int(rng.integers(2, 6)), replace=False)
            hist[bins] = 3  # equal masses invite ties
        else:
            x = np.concatenate([rng.normal(30, 8, 4000), rng.normal(160, 25, 2500)])
            hist[:] = np.bincount(np.clip(np.rint(x), 0, 255).astype(int), minlength=256)
        if hist.astype(bool).sum() < 2:
            hist[0] = hist[255] = 1
        mismatches += otsu_threshold(hist) != otsu_exhaustive(hist)
    criterion(4, mismatches == 0, f"{mismatches} mismatches against exhaustive search on 1000 histograms")


def test_criterion_05_macenko(criterion):
    worst_angle = worst_conc = 0.0
    for angle in (15, 20, 30, 45, 60):
        for seed in range(3):
            rng = np.random.default_rng(100 * angle + seed)
            truth = stain_pair(angle, rng)
            conc = two_stain_concentrations(4096, rng)
            stains, est, _ = macenko_analyse(render_od(conc, truth, (64, 64)))
            if angle_deg(stains[:, 0], truth[:, 0]) > angle_deg(stains[:, 0], truth[:, 1]):
                stains, est = stains[:, ::-1], est[:, ::-1]
            worst_angle = max(worst_angle, *(angle_deg(stains[:, j], truth[:, j]) for j in range(2)))
            rel = np.linalg.norm(est - conc, axis=1) / np.linalg.norm(conc, axis=1)
            worst_conc = max(worst_conc, float(rel.max()))
    criterion(5, worst_angle < 2.0 and worst_conc <= 0.05,
              f"worst stain angle {worst_angle:.1e} deg, worst concentration error {worst_conc:.1e}")


def test_criterion_06_reinhard(criterion):
    rng = np.random.default_rng(6)
    worst_change = 0
    for _ in range(20):
        tile = he_like_tile(rng, 48)
        out = reinhard_normalise(tile, LabStats.of(tile))
        worst_change = max(worst_change, int(np.abs(out.astype(int) - tile.astype(int)).max()))
    target = LabStats.of(he_like_tile(rng, 64, background=False))
    worst_rel = 0.0
    for _ in range(20):
        src = he_like_tile(rng, 64, background=False).astype(float)
        src = np.clip(src * rng.uniform(0.85, 1.0, 3) + rng.uniform(-10, 10, 3), 0, 255).astype(np.uint8)
        got = LabStats.of(reinhard_normalise(src, target))
        rel = np.abs(np.concatenate([np.subtract(got.means, target.means), np.subtract(got.stds, target.stds)]))
        rel /= np.abs(np.concatenate([target.means, target.stds]))
        worst_rel = max(worst_rel, float(rel.max()))
    criterion(6, worst_change <= 1 and worst_rel <= 0.01,
              f"identity max change {worst_change}, re-measured stats worst relative error {worst_rel:.2%}")


def test_criterion_07_statistics(criterion):
    rng = np.random.default_rng(7)
    example = np.allclose(bh_fdr([0.01, 0.02, 0.03, 0.04, 0.05]), 0.05, rtol=0, atol=1e-15)
    bh_dev = 0.0
    for _ in range(1000):
        p = rng.random(int(rng.integers(1, 40)))
        if rng.random() < 0.3:
            p[rng.integers(0, len(p), len(p) // 2)] = p[0]
        bh_dev = max(bh_dev, float(np.abs(bh_fdr(p) - bh_step_up(p.tolist())).max()))
    t_dev = 0.0
    for n in (3, 5, 10):
        for _ in range(30):
            r = paired_t_test(rng.normal(0.3, 1, n), rng.normal(0, 1, n))
            t_dev = max(t_dev, abs(r.p - t_two_sided_quad(r.t, n - 1)))
    correct = np.random.default_rng(70).random(200) < 0.8
    preds = PredictionSet(np.zeros(200, int), np.where(correct[:, None], [1.0, 0.0], [0.0, 1.0]))
    est = bootstrap_report(preds, accuracy, iterations=10_000, seed=7)
    half = (est.ci_high - est.ci_low) / 2
    analytic = 1.96 * np.sqrt(0.8 * 0.2 / 200)
    ok = example and bh_dev <= 1e-12 and t_dev < 1e-6 and abs(half - analytic) <= 0.2 * analytic
    criterion(7, ok, f"BH example {example}, BH max deviation {bh_dev:.1e}, t-test p deviation "
                     f"{t_dev:.1e}, bootstrap half-width {half:.4f} vs {analytic:.4f}")


def _tree_bytes(root, patterns):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for pattern in patterns for p in sorted(root.glob(pattern))}


def test_criterion_08_reproducibility(tmp_path, criterion):
    write_dataset(make_signal_bags(50, dim=8, patch_range=(3, 8), seed=8), tmp_path / "data")
    manifest = str(tmp_path / "data" / "manifest.csv")
    tiny = ["--preset", "rn50", "--learning-rate", "1e-3", "--model-size", "8,4", "--max-epochs", "3",
            "--max-patches", "5", "--seed", "8"]
    sched = tmp_path / "s.csv"
    sched.write_text("iteration,hyperparameters\n1,learning_rate\n2,dropout_p\n")
    grids = tmp_path / "g.kv"
    grids.write_text("learning_rate = 1e-3 3e-3\ndropout_p = 0.0 0.4\n")
    outputs = {}
    for workers in ("1", "3"):
        root = tmp_path / f"w{workers}"
        codes = [
            main(["train", "--manifest", manifest, "--out", str(root / "train"), "--workers", workers, *tiny]),
            main(["tune", "--manifest", manifest, "--schedule", str(sched), "--grids", str(grids),
                  "--out", str(root / "tune"), "--workers", workers, *tiny]),
            main(["evaluate", "--predictions", str(root / "train" / "predictions_test.csv"),
                  "--bootstrap", "500", "--seed", "8", "--out", str(root / "eval"), "--workers", workers]),
        ]
        assert codes == [EXIT_OK] * 3
        outputs[workers] = _tree_bytes(root, ["train/**/*.csv", "train/**/*.abml", "tune/*.csv",
                                              "tune/tuned_config.kv", "eval/*.csv"])
    same = outputs["1"] == outputs["3"] and len(outputs["1"]) > 10
    criterion(8, same, f"{len(outputs['1'])} prediction/report/model files identical across --workers 1 and 3")


def test_criterion_09_tuning(criterion):
    grids = {"learning_rate": (1e-2, 1e-3, 1e-4), "dropout_p": (0.0, 0.5), "beta1": (0.5, 0.9)}
    sched = TuningSchedule((TuningIteration(1, ("learning_rate", "beta1")),
                            TuningIteration(2, ("learning_rate", "dropout_p"))), grids)
    evaluated = []

    def mock_trainer(cfg):
        evaluated.append(cfg)
        return abs(np.log10(cfg.learning_rate) + 3) + abs(cfg.beta1 - 0.9) + (0.5 - cfg.dropout_p) * (
            1 + 2 * (cfg.learning_rate == 1e-2))

    final, trace = run_tuning(sched, mock_trainer, TrainConfig(dropout_p=0.0))
    it1 = [e for e in trace if e.iteration == 1]
    it2 = [e for e in trace if e.iteration == 2]
    sel1 = [e for e in it1 if e.selected][0]
    sel2 = [e for e in it2 if e.selected][0]
    semantics = (
        len(it1) == 6 and len(it2) == 6
        and sel1.loss == min(e.loss for e in it1) and sel2.loss == min(e.loss for e in it2)
        and all(e.config.beta1 == sel1.config.beta1 for e in it2)
        and final == sel2.config and final.beta1 == 0.9 and final.dropout_p == 0.5
    )
    shipped = load_schedule()
    structure = (len(shipped.iterations) == 17 and all(
        1 <= len(it.names) <= 6 and set(it.names) <= set(HYPERPARAMETERS) for it in shipped.iterations))
    criterion(9, semantics and structure,
              f"2-iteration mock: {len(evaluated)} configs evaluated, argmin carried forward {semantics}; "
              f"shipped schedule has {len(shipped.iterations)} valid iterations {structure}")


def test_criterion_10_ensemble(criterion):
    rng = np.random.default_rng(10)
    worst_mean = worst_single = 0.0
    for _ in range(50):
        models = [init_params(16, (8, 4), 5, rng) for _ in range(5)]
        h = rng.normal(size=(int(rng.integers(1, 30)), 16))
        probs, _ = ensemble_predict(models, h)
        members = np.array([model_proba(m, h) for m in models])
        worst_mean = max(worst_mean, float(np.abs(probs - members.sum(axis=0) / 5).max()))
        single, _ = ensemble_predict(models[:1], h)
        worst_single = max(worst_single, float(np.abs(single - members[0]).max()))
    criterion(10, worst_mean <= 1e-12 and worst_single == 0.0,
              f"ensemble vs member mean max deviation {worst_mean:.1e}; single-model deviation {worst_single}")
