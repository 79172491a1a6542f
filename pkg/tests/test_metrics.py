import json
import math

import numpy as np
import pytest

from egat.attacks import AttackConfig
from egat.autodiff import Tensor
from egat.explain import input_saliency
from egat.metrics import (MetricsReport, PairSampler, accuracy, comprehensiveness, comprehensiveness_per_sample,
                          estimate_bounds, estimate_lipschitz, evaluate, format_table, lemma1_check, lemma1_rhs,
                          linear_kappa_phi, lipschitz_ratios, prob_gradient, probabilities, sufficiency,
                          sufficiency_per_sample, theorem1_terms, topk_count, topk_mask, write_lemma1_csv,
                          write_reports)
from egat.model import ConvClassifier, LinearClassifier

from _oracles import softmax


def linear_model(W, b=None, in_shape=None):
    W = np.asarray(W, dtype=np.float64)
    m = LinearClassifier(W.shape[0], in_shape=in_shape or (W.shape[1],), seed=None)
    m.params["fc.w"] = Tensor(W, requires_grad=True)
    m.params["fc.b"] = Tensor(np.zeros(W.shape[0]) if b is None else np.asarray(b, float), requires_grad=True)
    return m


def constant_model(C=3):
    m = ConvClassifier(C, seed=0)
    m.load_state_dict({k: (np.zeros_like(v) if k != "fc.b" else np.arange(C, dtype=float))
                       for k, v in m.state_dict().items()})
    return m


def occlude_oracle(x, sal, k, keep):
    """Loop version: sort pixels by (-saliency, row-major index), fill with zero."""
    out = np.zeros_like(x) if keep else x.copy()
    h, w = sal.shape
    order = sorted(range(h * w), key=lambda i: (-sal[i // w, i % w], i))
    for i in order[:k]:
        r, c = divmod(i, w)
        out[:, r, c] = x[:, r, c] if keep else 0.0
    return out


# ---------------------------------------------------------------------------
# accuracy


def test_perfect_separable_model():
    m = linear_model([[-1.0, 0.0], [1.0, 0.0]])
    r = np.random.default_rng(0)
    x = np.column_stack([r.choice([-1.0, 1.0], 50) * r.uniform(0.5, 1, 50), r.normal(size=50)])
    y = (x[:, 0] > 0).astype(int)
    assert accuracy(m, x, y) == 1.0


def test_eps_zero_attack_equals_clean(small_ds):
    m = ConvClassifier(3, seed=1)
    x, y = small_ds.images[:20], small_ds.labels[:20]
    assert accuracy(m, x, y, AttackConfig("pgd", 0.0)) == accuracy(m, x, y)
    rep = evaluate(m, x, y, AttackConfig("pgd", 0.0))
    assert rep.adversarial_accuracy == rep.clean_accuracy


def test_chance_level_on_random_labels():
    r = np.random.default_rng(1)
    m = ConvClassifier(4, seed=2)
    x = r.uniform(size=(400, 3, 32, 32))
    y = r.integers(0, 4, size=400)
    acc = accuracy(m, x, y)
    sd = math.sqrt(0.25 * 0.75 / 400)
    assert abs(acc - 0.25) <= 3.5 * sd


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        accuracy(ConvClassifier(2), np.zeros((0, 3, 32, 32)), np.zeros(0, int))


def test_adversarial_accuracy_nonincreasing_in_eps():
    # a model that actually fits its data, so the attack has something to break
    from egat.data import synthetic_dataset
    from egat.train import TrainConfig, train
    from egat.data import split

    ds = synthetic_dataset(250, 2, ["flat"], seed=3)
    sp = split(ds, 0)
    res = train(TrainConfig(objective="erm", learning_rate=1e-2, max_steps=60, val_every=30, widths=(4, 8)), sp)
    m = res.best.build_model()
    x, y = ds.images[:200], ds.labels[:200]
    accs = [accuracy(m, x, y, AttackConfig("pgd", e, 5, seed=0)) for e in (0.0, 0.005, 0.01, 0.02, 0.04)]
    for a, b in zip(accs, accs[1:]):
        assert b <= a + 0.05


# ---------------------------------------------------------------------------
# comprehensiveness / sufficiency


def test_topk_rounding_and_ties():
    assert topk_count(0.2, 1024) == 205
    assert topk_count(1.0, 16) == 16
    assert topk_count(0.01, 16) == 1
    with pytest.raises(ValueError):
        topk_count(0.0, 16)
    m = topk_mask(np.zeros((4, 4)), 0.25)
    assert np.flatnonzero(m.ravel()).tolist() == [0, 1, 2, 3]


def test_constant_model_scores_zero(rng):
    m = constant_model()
    x = rng.uniform(size=(3, 3, 32, 32))
    y = [0, 1, 2]
    zero_sal = np.zeros((3, 32, 32))
    assert comprehensiveness(m, x, y, 0.2, saliency=zero_sal) == 0.0
    assert sufficiency(m, x, y, 0.3) == 0.0


def test_full_occlusion_and_full_keep(rng):
    m = ConvClassifier(3, seed=3)
    x = rng.uniform(size=(2, 3, 32, 32))
    y = np.array([2, 0])
    p = probabilities(m, x)[[0, 1], y]
    p0 = probabilities(m, np.zeros_like(x))[[0, 1], y]
    np.testing.assert_allclose(comprehensiveness_per_sample(m, x, y, 1.0), p - p0, atol=1e-15)
    np.testing.assert_array_equal(sufficiency_per_sample(m, x, y, 1.0), 0.0)


def test_linear_toy_matches_forward_oracle(rng):
    W = rng.normal(size=(2, 3 * 4 * 4))
    m = linear_model(W, in_shape=(3, 4, 4))
    x = rng.uniform(size=(3, 3, 4, 4))
    y = np.array([0, 1, 1])
    sal = rng.integers(0, 3, size=(3, 4, 4)).astype(float)  # plenty of ties
    comp = comprehensiveness_per_sample(m, x, y, 0.3, saliency=sal)
    suff = sufficiency_per_sample(m, x, y, 0.3, saliency=sal)
    for i in range(3):
        p = softmax(W @ x[i].ravel())[y[i]]
        pr = softmax(W @ occlude_oracle(x[i], sal[i], 5, keep=False).ravel())[y[i]]
        pk = softmax(W @ occlude_oracle(x[i], sal[i], 5, keep=True).ravel())[y[i]]
        assert abs(comp[i] - (p - pr)) < 1e-12
        assert abs(suff[i] - (p - pk)) < 1e-12


def test_gradcam_comp_suff_recompute_with_plain_forward(rng):
    m = ConvClassifier(3, seed=4)
    x = rng.uniform(size=(2, 3, 32, 32))
    y = np.array([1, 2])
    sal = input_saliency(m, x, y)
    comp = comprehensiveness_per_sample(m, x, y, 0.2)
    k = topk_count(0.2, 1024)
    for i in range(2):
        xr = occlude_oracle(x[i], sal[i], k, keep=False)
        ref = probabilities(m, x[i:i + 1])[0, y[i]] - probabilities(m, xr[None])[0, y[i]]
        assert abs(comp[i] - ref) < 1e-12


def test_mean_baseline(rng):
    m = ConvClassifier(2, seed=1)
    x = rng.uniform(size=(1, 3, 32, 32))
    a = comprehensiveness(m, x, [0], 0.2, baseline="zero")
    b = comprehensiveness(m, x, [0], 0.2, baseline="mean")
    assert a != b
    with pytest.raises(ValueError):
        comprehensiveness(m, x, [0], 0.2, baseline="blur")


# ---------------------------------------------------------------------------
# reports


def test_report_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        MetricsReport(1.5)
    with pytest.raises(ValueError):
        MetricsReport(0.5, comprehensiveness=-1.2)
    r = MetricsReport(0.5, 0.25, 0.1, -0.05, 0.2, "zero", attack={"kind": "pgd", "epsilon": 0.02}, n=8)
    write_reports([r], tmp_path / "r.json", tmp_path / "r.txt")
    assert json.loads((tmp_path / "r.json").read_text())[0]["sufficiency"] == -0.05
    lines = (tmp_path / "r.txt").read_text().splitlines()
    assert lines[0].split() == ["attack", "eps", "n", "ood", "cAcc", "aAcc", "comp", "suff", "k", "baseline"]
    assert "0.2500" in lines[1] and "-0.0500" in lines[1]
    assert format_table([{"a": None, "b": True}]).splitlines()[1].split() == ["-", "true"]


def test_evaluate_echoes_k(rng):
    m = ConvClassifier(3, seed=5)
    x = rng.uniform(size=(4, 3, 32, 32))
    rep = evaluate(m, x, [0, 1, 2, 0], metrics=("acc", "comp", "suff"), k_fraction=0.1)
    assert rep.k_fraction == 0.1 and rep.baseline == "zero"
    assert rep.comprehensiveness is not None and rep.sufficiency is not None


# ---------------------------------------------------------------------------
# Lipschitz estimates


def test_linear_map_estimate_bounded_by_spectral_norm():
    W = np.diag([3.0, 1.0])
    sampler = PairSampler(np.random.default_rng(0).uniform(size=(50, 2)), radius=0.1, clip=False)
    est = estimate_lipschitz(lambda a: a @ W.T, 2000, sampler)
    assert est <= 3.0 + 1e-12
    assert est > 2.9


def test_constant_function_and_degenerate_pairs():
    sampler = PairSampler(np.random.default_rng(0).uniform(size=(10, 4)))
    assert estimate_lipschitz(lambda a: np.ones((len(a), 3)), 100, sampler) == 0.0
    with pytest.raises(ValueError):
        estimate_lipschitz(lambda a: a, 5, lambda i, s: (np.ones(3), np.ones(3)))
    with pytest.raises(ValueError):
        estimate_lipschitz(lambda a: a, 0, sampler)


def test_nested_estimates_are_monotone():
    r = np.random.default_rng(3)
    W = r.normal(size=(4, 3))
    net = lambda a: np.maximum(a @ W.T, 0.0)  # noqa: E731
    sampler = PairSampler(r.uniform(size=(20, 3)), radius=0.05)
    ratios = lipschitz_ratios(net, 400, sampler, seed=1)
    ests = [estimate_lipschitz(net, m, sampler, seed=1) for m in (10, 50, 100, 400)]
    assert all(a <= b for a, b in zip(ests, ests[1:]))
    assert ests[-1] == np.nanmax(ratios)
    assert ests[-1] <= np.linalg.norm(W, 2) + 1e-12


def _conv_op_norm_bound(w):
    # stride-1 conv: every input pixel lands in at most k*k patches
    k = w.shape[-1]
    return k * np.linalg.norm(w.reshape(w.shape[0], -1), 2)


def test_estimate_below_layer_norm_product(small_ds):
    m = ConvClassifier(3, seed=6)
    sd = m.state_dict()
    h = w = 16  # last_conv spatial size
    ceiling = (_conv_op_norm_bound(sd["conv1.w"]) * _conv_op_norm_bound(sd["conv2.w"])
               / math.sqrt(h * w) * np.linalg.norm(sd["fc.w"], 2))
    # softmax is 1-Lipschitz, max-pool and relu are 1-Lipschitz
    est = estimate_lipschitz(lambda a: probabilities(m, a), 200, PairSampler(small_ds.images), seed=0)
    assert 0 < est <= ceiling


def test_linear_kappa_phi_bounds_gradient_variation():
    r = np.random.default_rng(4)
    W = r.normal(size=(3, 5))
    m = linear_model(W, r.normal(size=3))
    kappa = linear_kappa_phi(W)
    sampler = PairSampler(r.uniform(size=(30, 5)), radius=0.5, clip=False)
    for c in range(3):
        est = estimate_lipschitz(lambda a, c=c: prob_gradient(m, a, np.full(len(a), c)), 500, sampler)
        assert est <= kappa


def test_estimate_bounds_fields(small_ds):
    m = ConvClassifier(3, seed=7)
    b = estimate_bounds(m, small_ds.images[:10], small_ds.labels[:10], small_ds.masks[:10], pairs=20)
    assert b.kappa_f >= 0 and b.kappa_phi >= 0 and b.G >= b.kappa_bg >= 0
    assert b.sample_pairs == 20


# ---------------------------------------------------------------------------
# background-shift audit


def test_lemma1_identical_pair(small_ds):
    m = ConvClassifier(3, seed=8)
    x, mask, y = small_ds.images[0], small_ds.masks[0], small_ds.labels[0]
    res = lemma1_check(m, [(x, x.copy(), mask, y)], kappa_phi=1.0)
    assert res.lhs[0] == 0.0 and res.rhs[0] == 0.0 and res.satisfied[0]


def _bg_pairs(r, count, shape=(3, 8, 8)):
    pairs = []
    for _ in range(count):
        mask = np.zeros(shape[1:], bool)
        i, j = r.integers(0, 5, size=2)
        mask[i:i + 3, j:j + 3] = True
        a = r.uniform(size=shape)
        b = np.where(mask, a, r.uniform(size=shape))
        pairs.append((a, b, mask, int(r.integers(0, 3))))
    return pairs


def test_lemma1_linear_model_closed_form():
    r = np.random.default_rng(5)
    W = r.normal(scale=0.3, size=(3, 3 * 8 * 8))
    bias = r.normal(size=3)
    m = linear_model(W, bias, in_shape=(3, 8, 8))
    pairs = _bg_pairs(r, 200)
    res = lemma1_check(m, pairs, linear_kappa_phi(W))
    assert res.rate == 1.0
    for k, (a, b, mask, y) in enumerate(pairs[:10]):
        p = softmax(W @ a.ravel() + bias)
        g = (p[y] * (W[y] - p @ W)).reshape(3, 8, 8)  # d p_y / dx
        gbg = np.linalg.norm(np.where(mask, 0.0, g))
        dbg = np.linalg.norm(b - a)
        assert abs(res.bg_grad_norm[k] - gbg) < 1e-12
        assert abs(res.rhs[k] - lemma1_rhs(gbg, dbg, linear_kappa_phi(W))) < 1e-12
        q = softmax(W @ b.ravel() + bias)
        assert abs(res.lhs[k] - np.linalg.norm(q - p)) < 1e-12


def test_lemma1_errors(small_ds):
    m = ConvClassifier(3, seed=8)
    x, mask = small_ds.images[0], small_ds.masks[0]
    other = mask.copy()
    other[0, 0] = not other[0, 0]
    with pytest.raises(ValueError, match="masks differ"):
        lemma1_check(m, [(x, x, mask, other, 0)], 1.0)
    y = x.copy()
    y[:, mask] = 0.0
    with pytest.raises(ValueError, match="object pixels"):
        lemma1_check(m, [(x, y, mask, 0)], 1.0)


def test_lemma1_csv(tmp_path, small_ds):
    m = ConvClassifier(3, seed=8)
    from egat.data import background_shift_pairs

    res = lemma1_check(m, background_shift_pairs(small_ds, "noise", 4), 1.0)
    path = write_lemma1_csv(res, tmp_path / "l.csv")
    rows = path.read_text().splitlines()
    assert rows[0].split(",")[:5] == ["pair_id", "lhs", "rhs", "bg_shift_norm", "bg_grad_norm"]
    assert len(rows) == 5


def test_theorem_terms():
    t = theorem1_terms(2.0, 3.0, d=100, n=400, delta=0.05, empirical_risk=0.1, alpha=0.5, G=2.0)
    assert t["headline_term"] == pytest.approx((5.0 * 10 + math.log(20)) / 20)
    assert t["rademacher_term"] == pytest.approx((2.0 + 0.75) * 10 / 20)
    assert t["confidence_term"] == pytest.approx(math.sqrt(math.log(20) / 800))
    assert t["uniform_bound"] == pytest.approx(0.1 + 2 * t["rademacher_term"] + t["confidence_term"])
    with pytest.raises(ValueError):
        theorem1_terms(1, 1, 10, 10, delta=1.5)
