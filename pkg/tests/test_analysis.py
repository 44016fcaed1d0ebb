import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from clmdetour.analysis import (DegenerateRatioError, DivergenceProfile, RepresentationSet, TransplantSpec,
                                divergence_from_sets, divergence_profile, divergence_table, fit_logistic, linear_cka,
                                linear_probe, macro_f1, paired_bootstrap, ratio_from_profiles, seed_noise_ratio,
                                stratified_split, transplant)
from clmdetour.model import COMPONENT_KEYS, ModelConfig, init_model, layer_of

from conftest import perturbed_std


def hsic_cka_oracle(X, Y):
    """Double-loop HSIC on explicitly centred linear kernels."""
    n = X.shape[0]

    def centred_kernel(Z):
        K = [[float(sum(Z[i, c] * Z[j, c] for c in range(Z.shape[1]))) for j in range(n)] for i in range(n)]
        rows = [sum(r) / n for r in K]
        tot = sum(rows) / n
        return [[K[i][j] - rows[i] - rows[j] + tot for j in range(n)] for i in range(n)]

    def hsic(A, B):
        return sum(A[i][j] * B[i][j] for i in range(n) for j in range(n)) / (n - 1) ** 2

    Kc, Lc = centred_kernel(X), centred_kernel(Y)
    return hsic(Kc, Lc) / math.sqrt(hsic(Kc, Kc) * hsic(Lc, Lc))


def _orth(rng, p):
    q, r = np.linalg.qr(rng.normal(size=(p, p)))
    return q * np.sign(np.diag(r))


# -- CKA ---------------------------------------------------------------------


def test_cka_identity_and_scaling():
    X = np.random.default_rng(0).normal(size=(64, 16))
    assert abs(linear_cka(X, X) - 1.0) < 1e-12
    assert abs(linear_cka(X, 2 * X) - 1.0) < 1e-12
    assert abs(linear_cka(X, X + 5.0) - 1.0) < 1e-12


@pytest.mark.parametrize("seed", range(50))
def test_cka_matches_hsic_oracle(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(64, 16)), rng.normal(size=(64, 8))
    Y[:, :4] += X[:, :4] * rng.uniform(0, 2)
    assert abs(linear_cka(X, Y) - hsic_cka_oracle(X, Y)) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_cka_orthogonal_and_scale_invariance(seed):
    rng = np.random.default_rng(1000 + seed)
    X, Y = rng.normal(size=(64, 16)), rng.normal(size=(64, 8))
    base = linear_cka(X, Y)
    assert abs(linear_cka(X @ _orth(rng, 16), Y) - base) < 1e-10
    assert abs(linear_cka(X, Y @ _orth(rng, 8)) - base) < 1e-10
    assert abs(linear_cka(3.7 * X, 0.01 * Y) - base) < 1e-10


finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(arrays(np.float64, (12, 5), elements=finite), arrays(np.float64, (12, 3), elements=finite))
def test_cka_bounded_and_symmetric(X, Y):
    if np.ptp(X, axis=0).max() < 1e-6 or np.ptp(Y, axis=0).max() < 1e-6:
        return
    v = linear_cka(X, Y)
    assert -1e-9 <= v <= 1 + 1e-9
    assert abs(v - linear_cka(Y, X)) < 1e-12


def test_cka_errors():
    with pytest.raises(ValueError):
        linear_cka(np.ones((5, 3)), np.random.default_rng(0).normal(size=(5, 2)))
    with pytest.raises(ValueError):
        linear_cka(np.ones((5, 3)), np.ones((4, 3)))
    with pytest.raises(ValueError):
        linear_cka(np.ones((1, 3)), np.ones((1, 3)))
    row = np.random.default_rng(1).normal(size=(1, 7))
    with pytest.raises(ValueError, match="zero variance"):
        linear_cka(np.repeat(row, 6, 0), np.random.default_rng(2).normal(size=(6, 2)))


# -- divergence and ratio ----------------------------------------------------------


def _texts(n_sets, n=16, length=10):
    rngs = [np.random.default_rng(s) for s in range(n_sets)]
    return [[list(r.integers(2, 23, length)) for _ in range(n)] for r in rngs]


def _set(layers, text_set="0"):
    return RepresentationSet(dict(enumerate(layers)), text_set=text_set)


def test_divergence_of_identical_models_is_zero(tiny_model):
    texts = _texts(2)
    prof = divergence_profile(tiny_model, tiny_model, texts)
    assert prof.per_seed.shape == (2, 2)
    assert np.all(np.abs(prof.mean) < 1e-12)


def test_divergence_profile_is_symmetric(tiny_config):
    a = perturbed_std(init_model(tiny_config, 0), 0.2, 1)
    b = perturbed_std(init_model(tiny_config, 1), 0.2, 2)
    texts = _texts(1)
    np.testing.assert_allclose(divergence_profile(a, b, texts).mean, divergence_profile(b, a, texts).mean,
                               atol=1e-12)


def test_isotropic_rescale_of_one_layer_representation():
    rng = np.random.default_rng(0)
    reps = [rng.normal(size=(20, 6)) for _ in range(3)]
    scaled = [reps[0], 4.0 * reps[1], reps[2] + rng.normal(size=(20, 6))]
    prof = divergence_from_sets([_set(reps)], [_set(scaled)])
    assert abs(prof.mean[1]) < 1e-12 and prof.mean[2] > 0.01


def test_divergence_rejects_mismatches(tiny_config):
    other = init_model(ModelConfig(n_layers=3, hidden_dim=16, n_heads=2, vocab_size=24, max_seq_len=16), 0)
    with pytest.raises(ValueError, match="layer"):
        divergence_profile(init_model(tiny_config, 0), other, [[[3, 4, 5]]])
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        divergence_from_sets([_set([rng.normal(size=(5, 2))], "a")], [_set([rng.normal(size=(5, 2))], "b")])


def test_ratio_trivial_cases(tiny_config):
    texts = _texts(2)
    s1 = perturbed_std(init_model(tiny_config, 0), 0.3, 1)
    s2 = perturbed_std(init_model(tiny_config, 0), 0.3, 2)
    assert np.all(seed_noise_ratio(s1, s1, s2, texts).ratio == 0)
    np.testing.assert_allclose(seed_noise_ratio(s2, s1, s2, texts).ratio, 1.0, rtol=0, atol=1e-12)
    with pytest.raises(DegenerateRatioError, match="layer 0"):
        seed_noise_ratio(s2, s1, s1, texts)


def test_ratio_matches_manual_arithmetic():
    rng = np.random.default_rng(5)
    X = [rng.normal(size=(30, 4)) for _ in range(2)]
    clm = [X[0] + 0.8 * rng.normal(size=(30, 4)), X[1] + 1.5 * rng.normal(size=(30, 4))]
    s2 = [X[0] + 0.3 * rng.normal(size=(30, 4)), X[1] + 0.2 * rng.normal(size=(30, 4))]
    num = divergence_from_sets([_set(clm)], [_set(X)])
    den = divergence_from_sets([_set(s2)], [_set(X)])
    r = ratio_from_profiles(num, den)
    for l in range(2):
        expected = (1 - hsic_cka_oracle(clm[l], X[l])) / (1 - hsic_cka_oracle(s2[l], X[l]))
        assert abs(r.ratio[l] - expected) < 1e-10


def test_divergence_table_layout():
    prof = DivergenceProfile([0, 1], np.array([[0.1, 0.2], [0.3, 0.2]]))
    rat = ratio_from_profiles(prof, DivergenceProfile([0, 1], np.array([[0.05, 0.1]])))
    lines = divergence_table(prof, rat).splitlines()
    assert lines[0] == "layer,d_mean,d_ci95,r,numerator,denominator"
    assert lines[1].startswith("0,0.2,0.196,4,0.2,0.05")
    assert divergence_table(prof).splitlines()[2].endswith(",,,")


# -- transplants ---------------------------------------------------------------


@pytest.fixture
def pair():
    cfg = ModelConfig(n_layers=4, hidden_dim=8, n_heads=2, vocab_size=12, max_seq_len=8)
    return perturbed_std(init_model(cfg, 0), 0.1, 0), perturbed_std(init_model(cfg, 1), 0.1, 1)


def _origin(hybrid, target, source):
    out = {}
    for k, v in hybrid.params.items():
        t, s = np.array_equal(v, target.params[k]), np.array_equal(v, source.params[k])
        assert t != s, k
        out[k] = "target" if t else "source"
    return out


def test_transplant_empty_range_is_target(pair):
    target, source = pair
    assert transplant(target, source, TransplantSpec(2, 1)).content_hash() == target.content_hash()


def test_transplant_all_blocks(pair):
    target, source = pair
    origin = _origin(transplant(target, source, TransplantSpec(0, 3)), target, source)
    for k, o in origin.items():
        assert o == ("source" if layer_of(k) is not None else "target"), k


def test_transplant_component_selectivity(pair):
    target, source = pair
    origin = _origin(transplant(target, source, TransplantSpec(1, 2, ("mlp",))), target, source)
    for k, o in origin.items():
        leaf = k.split(".", 2)[-1]
        want = layer_of(k) in (1, 2) and leaf in COMPONENT_KEYS["mlp"]
        assert o == ("source" if want else "target"), k


def test_transplant_errors(pair):
    target, _ = pair
    other = init_model(ModelConfig(n_layers=4, hidden_dim=16, n_heads=2, vocab_size=12, max_seq_len=8), 0)
    with pytest.raises(ValueError):
        transplant(target, other, TransplantSpec(0, 1))
    with pytest.raises(ValueError):
        transplant(target, target, TransplantSpec(0, 4))
    with pytest.raises(ValueError):
        TransplantSpec(0, 1, ("embeddings",))


# -- probes ------------------------------------------------------------------


def test_macro_f1_hand_example():
    # class 0: tp 1 fp 1 fn 1 -> 0.5; class 1: tp 1 fp 1 fn 1 -> 0.5; class 2: tp 1 -> 1.0
    assert macro_f1([0, 0, 1, 1, 2], [0, 1, 1, 0, 2]) == pytest.approx((0.5 + 0.5 + 1.0) / 3)


def test_probe_separates_blobs():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-3, 0.5, (60, 5)), rng.normal(3, 0.5, (60, 5))])
    y = np.repeat([0, 1], 60)
    r = linear_probe(X, y, seeds=(0, 1, 2))
    assert r.f1 == [1.0, 1.0, 1.0]


def test_shuffled_labels_score_near_chance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 8))
    y = np.repeat(np.arange(4), 50)
    null = [linear_probe(X, rng.permutation(y), seeds=(s,)).mean_f1 for s in range(30)]
    mu, sd = np.mean(null), np.std(null, ddof=1)
    observed = linear_probe(X, np.random.default_rng(99).permutation(y), seeds=(0, 1, 2)).mean_f1
    assert abs(observed - mu) < 3 * sd
    assert abs(mu - 0.25) < 0.1


def test_duplicated_rows_leave_the_fit_unchanged():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 3))
    y = (X[:, 0] + 0.5 * rng.normal(size=40) > 0).astype(int)
    a = fit_logistic(X, y)
    b = fit_logistic(np.concatenate([X, X]), np.concatenate([y, y]))
    np.testing.assert_allclose(a.decision_function(X), b.decision_function(X), atol=1e-5)
    assert np.array_equal(a.predict(X), b.predict(X))


def test_logistic_agrees_with_sklearn():
    sk = pytest.importorskip("sklearn.linear_model")
    rng = np.random.default_rng(3)
    X = rng.normal(size=(150, 4))
    y = np.argmax(X[:, :3] + 0.7 * rng.normal(size=(150, 3)), axis=1)
    ours = fit_logistic(X, y, l2=1e-3)
    Z = (X - X.mean(0)) / X.std(0)
    ref = sk.LogisticRegression(C=1.0 / (1e-3 * len(y)), tol=1e-10, max_iter=10_000).fit(Z, y)
    assert np.mean(ours.predict(X) == ref.predict(Z)) > 0.97


def test_stratified_split_keeps_class_shares():
    y = np.repeat([0, 1, 2], [50, 30, 20])
    tr, te = stratified_split(y, 0.3, 0)
    assert np.bincount(y[te]).tolist() == [15, 9, 6]
    assert set(tr).isdisjoint(te) and len(tr) + len(te) == 100


def test_probe_rejects_single_class():
    with pytest.raises(ValueError):
        linear_probe(np.zeros((10, 2)), np.zeros(10, int))


# -- paired bootstrap ----------------------------------------------------------


def sign_flip_pvalue(d, n_perm, seed):
    """Permutation oracle: random sign flips of the cell differences, same studentised statistic."""
    rng = np.random.default_rng(seed)

    def t(x):
        return x.mean(-1) / (x.std(-1, ddof=1) / math.sqrt(x.shape[-1]))

    obs = abs(t(d))
    flips = rng.choice([-1.0, 1.0], size=(n_perm, d.size))
    return (np.sum(np.abs(t(flips * d)) >= obs) + 1) / (n_perm + 1)


def test_bootstrap_identical_grids():
    A = np.random.default_rng(0).random((8, 9))
    assert paired_bootstrap(A, A.copy()).p_value == 1.0


def test_bootstrap_constant_shift_hits_the_floor():
    A = np.random.default_rng(0).random((8, 9))
    r = paired_bootstrap(A + 10, A, n_resamples=2000)
    assert r.p_value <= 1 / 2000 and r.mean_diff == pytest.approx(10)


def test_bootstrap_argument_errors():
    A = np.zeros((3, 3))
    with pytest.raises(ValueError):
        paired_bootstrap(A, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        paired_bootstrap(A, A, n_resamples=10)


def test_bootstrap_is_deterministic_in_seed():
    rng = np.random.default_rng(4)
    A, B = rng.random((8, 9)), rng.random((8, 9))
    assert paired_bootstrap(A, B, seed=3).p_value == paired_bootstrap(A, B, seed=3).p_value


@pytest.mark.parametrize("grid", range(10))
def test_bootstrap_agrees_with_permutation_oracle(grid):
    n = 20_000
    rng = np.random.default_rng(500 + grid)
    effect = np.linspace(0.0, 0.35, 10)[grid]
    B = rng.normal(0.6, 0.1, (8, 9))
    A = B + 0.1 * (effect + rng.normal(size=(8, 9)))
    p = paired_bootstrap(A, B, n_resamples=n, seed=grid).p_value
    q = sign_flip_pvalue((A - B).ravel(), n, grid)
    se = math.sqrt(2 * max(p * (1 - p), q * (1 - q), 1e-3) / n)
    assert abs(p - q) < 4 * se, (p, q)
