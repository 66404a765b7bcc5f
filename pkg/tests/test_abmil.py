import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import finite_difference_check
from ovmil.abmil import (
    AbmilParams,
    AdamState,
    CacheError,
    DivergenceError,
    EmptyBagError,
    ShapeError,
    adam_step,
    backward,
    balanced_ce_loss,
    class_weights,
    forward,
    init_params,
    predict_proba,
    read_checkpoint,
    read_history,
    sampling_weights,
    train_fold,
    write_checkpoint,
    write_history,
)
from ovmil.config import TrainConfig, get_preset
from ovmil.synthetic import make_signal_bags

COHORT_SLIDES = [1266, 92, 198, 209, 99]


def _params(dim=4, size=(4, 2), seed=0):
    return init_params(dim, size, 5, np.random.default_rng(seed))


# -- forward ----------------------------------------------------------------

def test_single_patch_attention_is_one():
    _, a, _ = forward(np.ones((1, 4)), _params())
    assert a.tolist() == [1.0]


def test_identical_patches_split_attention():
    _, a, _ = forward(np.ones((2, 4)), _params())
    assert a.tolist() == [0.5, 0.5]


def test_forward_matches_straight_line_recomputation(rng):
    p = _params(seed=3)
    h = rng.normal(size=(3, 4))
    logits, a, _ = forward(h, p)
    u = [[max(0.0, sum(h[i, d] * p.W1[d, j] for d in range(4)) + p.b1[j]) for j in range(4)] for i in range(3)]
    s = []
    for i in range(3):
        t = [np.tanh(sum(u[i][j] * p.V[j, k] for j in range(4)) + p.bv[k]) for k in range(2)]
        s.append(sum(t[k] * p.w[k] for k in range(2)))
    e = [np.exp(x) for x in s]
    att = [x / sum(e) for x in e]
    z = [sum(att[i] * u[i][j] for i in range(3)) for j in range(4)]
    want = [sum(z[j] * p.W2[j, c] for j in range(4)) + p.b2[c] for c in range(5)]
    np.testing.assert_allclose(a, att, rtol=1e-13)
    np.testing.assert_allclose(logits, want, rtol=1e-12, atol=1e-14)


def test_forward_errors():
    p = _params()
    with pytest.raises(EmptyBagError):
        forward(np.zeros((0, 4)), p)
    with pytest.raises(ShapeError):
        forward(np.zeros((3, 5)), p)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 30))
def test_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    p = _params(dim=6, size=(5, 3), seed=seed)
    h = rng.normal(size=(n, 6))
    perm = rng.permutation(n)
    l1, a1, _ = forward(h, p)
    l2, a2, _ = forward(h[perm], p)
    assert (a1 > 0).all() and abs(a1.sum() - 1) < 1e-9
    np.testing.assert_allclose(a2, a1[perm], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(l2, l1, rtol=1e-12, atol=1e-12)


def test_data_dropout_identity_when_cap_exceeds_bag(rng):
    p = _params()
    h = rng.normal(size=(7, 4))
    l1, a1, c = forward(h, p, training=True, rng=1, max_patches=7)
    l2, a2, _ = forward(h, p)
    np.testing.assert_array_equal(c.index, np.arange(7))
    np.testing.assert_array_equal(l1, l2)


def test_data_dropout_subsamples(rng):
    _, a, c = forward(rng.normal(size=(50, 4)), _params(), training=True, rng=2, max_patches=10)
    assert len(a) == 10 and len(set(c.index.tolist())) == 10


def test_eval_mode_seed_independent(rng):
    h = rng.normal(size=(9, 4))
    a = forward(h, _params(), rng=1, dropout_p=0.5)[0]
    b = forward(h, _params(), rng=2, dropout_p=0.5)[0]
    np.testing.assert_array_equal(a, b)


def test_parameter_dropout_scales_survivors(rng):
    h = rng.normal(size=(9, 4))
    _, _, c = forward(h, _params(), training=True, rng=4, dropout_p=0.25)
    assert set(np.unique(c.keep)) <= {0.0, 1 / 0.75}


# -- softmax, loss, weights -------------------------------------------------

def test_predict_proba_examples():
    np.testing.assert_allclose(predict_proba(np.zeros(5)), [0.2] * 5, rtol=0, atol=1e-15)
    p = predict_proba(np.array([1000.0, 0, 0, 0, 0]))
    assert np.isfinite(p).all() and p[0] == 1.0
    x = np.arange(1.0, 6.0)
    np.testing.assert_allclose(predict_proba(x), np.exp(x) / np.exp(x).sum(), rtol=1e-15)
    assert abs(predict_proba(x).sum() - 1) < 1e-12


def test_class_weights_cohort_counts():
    w = class_weights(COHORT_SLIDES)
    assert w[0] == pytest.approx(1864 / (5 * 1266))
    assert w[0] == pytest.approx(0.2945, abs=5e-5)
    assert w[1] == pytest.approx(4.052, abs=5e-4)
    np.testing.assert_allclose(class_weights([7] * 5), 1.0)


def test_loss_examples():
    assert balanced_ce_loss(np.array([1.0, 0, 0, 0, 0]), 0, np.ones(5)) == 0.0
    assert balanced_ce_loss(np.array([0.0, 1, 0, 0, 0]), 0, np.ones(5)) == pytest.approx(-np.log(1e-12))
    assert balanced_ce_loss(np.full(5, 0.2), 2, np.full(5, 3.0)) == pytest.approx(-3 * np.log(0.2))


# -- backward ---------------------------------------------------------------

def test_gradients_match_finite_differences(rng):
    worst = max(finite_difference_check(rng) for _ in range(20))
    assert worst < 1e-4


def test_saturated_head_bias_gradient():
    p = _params()
    p.b2[:] = [0, 800, 0, 0, 0]
    p.version += 1
    _, _, c = forward(np.ones((2, 4)), p)
    g = backward(c, 1, np.full(5, 2.0))
    np.testing.assert_array_equal(g.b2, np.zeros(5))


def test_gradient_linear_in_class_weight(rng):
    p = _params(seed=5)
    _, _, c = forward(rng.normal(size=(6, 4)), p)
    g1 = backward(c, 3, np.ones(5))
    g2 = backward(c, 3, np.full(5, 2.0))
    for a, b in zip(g1.arrays(), g2.arrays()):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-14, atol=0)


def test_stale_cache_rejected(rng):
    p = _params()
    _, _, c = forward(rng.normal(size=(3, 4)), p)
    adam_step(p, p.zeros_like(), AdamState.zeros(p), TrainConfig())
    with pytest.raises(CacheError):
        backward(c, 0, np.ones(5))


# -- Adam -------------------------------------------------------------------

def _scalar_params(value):
    one = np.array([[value]])
    return AbmilParams(one, [value], one, [value], [value], one, [value])


def _fill(params, g):
    return AbmilParams(*(np.full_like(a, g) for a in params.arrays()))


def test_adam_zero_gradient_no_change():
    p = _params()
    before = p.copy()
    adam_step(p, p.zeros_like(), AdamState.zeros(p), TrainConfig(weight_decay=0.0))
    assert p.allclose(before, rtol=0, atol=0)


def test_adam_first_step_hand_value():
    cfg = TrainConfig(learning_rate=0.01, beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=0.0)
    p = _scalar_params(0.0)
    adam_step(p, _fill(p, 1.0), AdamState.zeros(p), cfg)
    assert p.b2[0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-14)


def test_adam_two_steps_rn50_moments():
    cfg = get_preset("rn50").replace(weight_decay=0.0)
    assert (cfg.beta1, cfg.beta2, cfg.epsilon, cfg.learning_rate) == (0.75, 0.95, 1e-2, 2e-3)
    p = _scalar_params(0.0)
    state = AdamState.zeros(p)
    adam_step(p, _fill(p, 1.0), state, cfg)
    # step 1: m = 0.25, v = 0.05, both bias corrections give exactly 1
    step1 = -0.002 / 1.01
    assert p.W1[0, 0] == pytest.approx(step1, rel=1e-13)
    adam_step(p, _fill(p, 0.5), state, cfg)
    # step 2: m = 0.75*0.25 + 0.25*0.5 = 0.3125, m_hat = 0.3125 / 0.4375 = 5/7
    #         v = 0.95*0.05 + 0.05*0.25 = 0.06,   v_hat = 0.06 / 0.0975 = 8/13
    step2 = -0.002 * (5 / 7) / (np.sqrt(8 / 13) + 0.01)
    assert p.W1[0, 0] == pytest.approx(step1 + step2, rel=1e-13)
    assert state.step == 2 and all((v >= 0).all() for v in state.v.values())


def test_adam_weight_decay_is_coupled():
    cfg = TrainConfig(learning_rate=0.1, beta1=0.5, beta2=0.5, epsilon=1e-12, weight_decay=0.5)
    p = _scalar_params(2.0)
    adam_step(p, _fill(p, 0.0), AdamState.zeros(p), cfg)
    # g = 0 + 0.5 * 2 = 1 -> m_hat = v_hat = 1 -> step -lr
    assert p.b1[0] == pytest.approx(1.9, rel=1e-11)


def test_adam_divergence():
    p = _params()
    g = p.zeros_like()
    g.W2[0, 0] = np.nan
    with pytest.raises(DivergenceError):
        adam_step(p, g, AdamState.zeros(p), TrainConfig())


# -- sampling and training --------------------------------------------------

def test_class_weighted_sampling_is_balanced():
    labels = np.repeat(np.arange(5), COHORT_SLIDES)
    p = sampling_weights(labels)
    draws = np.random.default_rng(0).choice(len(labels), size=100_000, p=p)
    freq = np.bincount(labels[draws], minlength=5) / 100_000
    assert np.abs(freq - 0.2).max() <= 0.01


def _small_task(seed=0):
    bags = make_signal_bags(40, dim=16, patch_range=(5, 15), seed=seed)
    pairs = [(b.features, b.label) for b in bags]
    return pairs[:30], pairs[30:]


def _small_config(**kw):
    base = dict(learning_rate=1e-3, model_size=(16, 8), max_epochs=4, max_patches=10, seed=3)
    base.update(kw)
    return get_preset("rn50").replace(**base)


def test_train_fold_deterministic():
    train, val = _small_task()
    p1, h1 = train_fold(train, val, _small_config())
    p2, h2 = train_fold(train, val, _small_config())
    assert h1 == h2
    assert p1.allclose(p2, rtol=0, atol=0)
    assert len(h1) == 4


def test_train_fold_constant_lr_with_unit_factor():
    train, val = _small_task()
    _, hist = train_fold(train, val, _small_config(lr_decay_factor=1.0, lr_decay_patience=1, max_epochs=6))
    assert {r.lr for r in hist} == {1e-3}


def test_train_fold_keeps_best_epoch():
    train, val = _small_task(1)
    best, hist = train_fold(train, val, _small_config(max_epochs=6))
    from ovmil.abmil import evaluate_loss
    weights = class_weights(np.bincount([y for _, y in train], minlength=5))
    assert evaluate_loss(val, best, weights) == pytest.approx(min(r.val_loss for r in hist), rel=1e-12)


def test_train_fold_plateau_decay():
    train, val = _small_task()
    _, hist = train_fold(train, val, _small_config(learning_rate=0.5, lr_decay_patience=1,
                                                    lr_decay_factor=0.5, max_epochs=8))
    lrs = [r.lr for r in hist]
    assert lrs == sorted(lrs, reverse=True) and lrs[-1] < lrs[0]


def test_checkpoint_and_history_round_trip(tmp_path):
    train, val = _small_task()
    cfg = _small_config(max_epochs=2)
    params, hist = train_fold(train, val, cfg)
    write_checkpoint(tmp_path / "m.abml", params, cfg)
    back, cfg_back = read_checkpoint(tmp_path / "m.abml")
    assert back.allclose(params, rtol=0, atol=0)
    assert cfg_back == cfg
    assert (tmp_path / "m.abml").read_bytes()[:4] == b"ABML"
    write_history(hist, tmp_path / "h.csv")
    assert read_history(tmp_path / "h.csv") == hist
