import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dttc.data import Dataset, SyntheticSpec, generate_synthetic
from dttc.taxonomy import parse_taxonomy, synthetic_taxonomy
from dttc.trainer import (
    NumericalError,
    TrainConfig,
    batch_loss,
    batch_weights,
    fit,
    gradients,
    level_loss,
)
from dttc.ttc import ModelParams, Variant, checkpoint_bytes, init_params
from oracles import (
    BEAUTY,
    finite_difference,
    gradient_problem,
    relative_errors,
    unrolled_loss,
)

TAX = parse_taxonomy(BEAUTY)


def problem_params(weights, biases, variant, tau):
    return ModelParams([w.copy() for w in weights], [b.copy() for b in biases], variant, tau)


# -- level_loss ---------------------------------------------------------------------

def test_level_loss_examples():
    assert level_loss([0.0, 1.0, 0.0], 1) == pytest.approx(-math.log1p(1e-12), abs=1e-15)
    assert level_loss(np.full(5, 0.2), 3) == pytest.approx(math.log(5), abs=1e-10)
    with pytest.raises(IndexError):
        level_loss([0.5, 0.5], 2)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_level_loss_matches_log(seed, k):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(k))
    y = int(rng.integers(0, k))
    assert abs(level_loss(p, y) - (-math.log(p[y] + 1e-12))) <= 1e-12


# -- batch_loss ------------------------------------------------------------------

def test_base_single_instance_is_sum_of_level_losses():
    rng = np.random.default_rng(0)
    params = init_params(TAX, 3, "base", 1.0, rng)
    x = rng.normal(size=(1, 3))
    y = np.array([[0, 1, 2]])
    from dttc.ttc import forward
    tr = forward(params, TAX, x)
    expected = sum(level_loss(p[0], y[0, i]) for i, p in enumerate(tr.probs))
    assert batch_loss(params, TAX, (x, y, np.array(["Male"])), TrainConfig(variant="base")) == \
        pytest.approx(expected, abs=1e-15)


def test_all_neutral_hd_equals_h():
    rng = np.random.default_rng(1)
    params = init_params(TAX, 4, "hd", 1.0, rng)
    x = rng.normal(size=(6, 4))
    y = np.stack([TAX.local_path(int(k)) for k in rng.integers(0, 4, 6)])
    g = np.array(["Background"] * 6)
    h = params.copy()
    h.variant = Variant.H
    assert batch_loss(params, TAX, (x, y, g), TrainConfig()) == batch_loss(h, TAX, (x, y, g), TrainConfig())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Variant)))
def test_batch_loss_matches_unrolled_oracle(seed, variant):
    tax, weights, biases, x, y, groups, pi, tau = gradient_problem(seed)
    params = problem_params(weights, biases, variant, tau)
    cfg = TrainConfig(variant=variant, pi=tuple(pi), tau=tau)
    expected, _ = unrolled_loss(
        [w.tolist() for w in weights], [b.tolist() for b in biases], tax, x.tolist(), y.tolist(),
        groups.tolist(), masked=variant.masked, reweighted=variant.reweighted, tau=tau, pi=pi,
    )
    assert abs(batch_loss(params, tax, (x, y, groups), cfg) - expected) <= 1e-10


def test_empty_batch_rejected():
    params = init_params(TAX, 2, "h", 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError, match="empty"):
        batch_loss(params, TAX, (np.zeros((0, 2)), np.zeros((0, 3), int), np.array([], str)), TrainConfig())


# -- gradients ---------------------------------------------------------------------

def test_zero_params_gradient_is_uniform_minus_one_hot():
    params = ModelParams([np.zeros((k, 2)) for k in TAX.sizes], [np.zeros(k) for k in TAX.sizes], "base")
    x = np.array([[1.0, 0.0]])
    y = np.array([[0, 1, 3]])
    grads = gradients(params, TAX, (x, y, np.array(["Male"])), TrainConfig(variant="base"))
    for i, (gw, gb) in enumerate(grads):
        k = TAX.sizes[i]
        expected = np.full(k, 1 / k)
        expected[y[0, i]] -= 1
        assert np.allclose(gb, expected, atol=1e-15)
        assert np.allclose(gw[:, 0], expected, atol=1e-15)
        assert np.all(gw[:, 1] == 0)


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("mode", ["detached", "full"])
def test_gradients_vanish_at_one_hot_truth(variant, mode):
    # huge logits make every softmax exactly one-hot on the true path
    y = np.array([[0, 1, 3]])
    big = 1e4
    weights, biases = [], []
    for i, k in enumerate(TAX.sizes):
        weights.append(np.zeros((k, 1)))
        b = np.zeros(k)
        b[y[0, i]] = big
        biases.append(b)
    params = ModelParams(weights, biases, variant)
    grads = gradients(params, TAX, (np.ones((1, 1)), y, np.array(["Female"])),
                      TrainConfig(variant=variant, mask_gradient=mode))
    for gw, gb in grads:
        assert np.all(gw == 0) and np.all(gb == 0)


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("mode", ["detached", "full"])
def test_gradients_match_finite_differences(variant, mode):
    worst = 0.0
    for seed in range(20):
        tax, weights, biases, x, y, groups, pi, tau = gradient_problem(seed)
        params = problem_params(weights, biases, variant, tau)
        cfg = TrainConfig(variant=variant, pi=tuple(pi), tau=tau, mask_gradient=mode)
        lw = batch_weights(params, tax, (x, y, groups), cfg)
        analytic = gradients(params, tax, (x, y, groups), cfg, weights=lw)
        numeric = finite_difference(weights, biases, tax, x, y, lw, masked=variant.masked,
                                    detached=(mode == "detached"), tau=tau, pi=pi)
        worst = max(worst, relative_errors(analytic, numeric).max())
    assert worst < 1e-4


def test_detached_and_full_differ_when_masked():
    tax, weights, biases, x, y, groups, pi, tau = gradient_problem(3)
    params = problem_params(weights, biases, "h", tau)
    det = gradients(params, tax, (x, y, groups), TrainConfig(variant="h", tau=tau))
    full = gradients(params, tax, (x, y, groups), TrainConfig(variant="h", tau=tau, mask_gradient="full"))
    # the deepest head sees no upstream mask gradient in either mode
    assert np.allclose(det[-1][0], full[-1][0], atol=1e-15)
    assert not np.allclose(det[0][0], full[0][0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Variant)), st.sampled_from(["detached", "full"]))
def test_permuting_batch_changes_nothing(seed, variant, mode):
    tax, weights, biases, x, y, groups, pi, tau = gradient_problem(seed)
    params = problem_params(weights, biases, variant, tau)
    cfg = TrainConfig(variant=variant, pi=tuple(pi), tau=tau, mask_gradient=mode)
    perm = np.random.default_rng(seed).permutation(len(x))
    a = batch_loss(params, tax, (x, y, groups), cfg)
    b = batch_loss(params, tax, (x[perm], y[perm], groups[perm]), cfg)
    assert abs(a - b) <= 1e-12
    ga = gradients(params, tax, (x, y, groups), cfg)
    gb = gradients(params, tax, (x[perm], y[perm], groups[perm]), cfg)
    for (aw, ab), (bw, bb) in zip(ga, gb):
        assert np.max(np.abs(aw - bw)) <= 1e-12 and np.max(np.abs(ab - bb)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_scaling_pi_scales_loss_and_gradient(seed, c):
    tax, weights, biases, x, y, groups, pi, tau = gradient_problem(seed)
    params = problem_params(weights, biases, "hd", tau)
    cfg1 = TrainConfig(pi=tuple(pi), tau=tau)
    cfgc = TrainConfig(pi=tuple(c * pi), tau=tau)
    l1 = batch_loss(params, tax, (x, y, groups), cfg1)
    lc = batch_loss(params, tax, (x, y, groups), cfgc)
    assert lc == pytest.approx(c * l1, rel=1e-12)
    for (w1, b1), (wc, bc) in zip(gradients(params, tax, (x, y, groups), cfg1),
                                  gradients(params, tax, (x, y, groups), cfgc)):
        assert np.allclose(wc, c * w1, rtol=1e-10, atol=1e-14)
        assert np.allclose(bc, c * b1, rtol=1e-10, atol=1e-14)


def test_full_batch_descent_is_monotone_for_single_level():
    # one level, no mask: multinomial logistic regression is convex
    tax = parse_taxonomy("a\t-\nb\t-\nc\t-\n")
    rng = np.random.default_rng(2)
    x = rng.normal(size=(60, 4))
    y = rng.integers(0, 3, (60, 1))
    g = np.array(["Male"] * 60)
    params = init_params(tax, 4, "base", 1.0, rng)
    cfg = TrainConfig(variant="base")
    prev = batch_loss(params, tax, (x, y, g), cfg)
    for _ in range(200):
        (gw, gb), = gradients(params, tax, (x, y, g), cfg)
        params.weights[0] -= 0.05 * gw
        params.biases[0] -= 0.05 * gb
        cur = batch_loss(params, tax, (x, y, g), cfg)
        assert cur <= prev + 1e-15
        prev = cur


# -- fit -----------------------------------------------------------------------------

def separable_two_level():
    tax = synthetic_taxonomy((2, 2))
    spec = SyntheticSpec(branching=(2, 2), samples_per_leaf=50, dim=6, separation=12.0,
                         level_decay=0.6, noise=0.3, seed=4)
    return tax, generate_synthetic(spec, tax)


def test_fit_separable_data():
    tax, ds = separable_two_level()
    params, report = fit(ds, tax, TrainConfig(epochs=50, lr=0.05, seed=1))
    from dttc.ttc import predict_paths
    pred, _ = predict_paths(params, tax, ds.features)
    assert np.all(pred == ds.labels, axis=1).mean() > 0.95
    assert len(report.epochs) == 50
    assert all(np.isfinite(r["loss"]) for r in report.epochs)


def test_zero_epochs_returns_initialisation():
    tax, ds = separable_two_level()
    params, report = fit(ds, tax, TrainConfig(epochs=0, seed=9))
    ref = init_params(tax, ds.dim, "hd", 1.0, np.random.default_rng(9))
    assert all(np.array_equal(a, b) for a, b in zip(params.weights, ref.weights))
    assert report.epochs == []


@pytest.mark.parametrize("variant", list(Variant))
def test_fit_is_deterministic(variant):
    tax, ds = separable_two_level()
    cfg = TrainConfig(epochs=3, variant=variant, seed=5, epoch_counts=(variant == Variant.HD))
    a, ra = fit(ds, tax, cfg)
    b, rb = fit(ds, tax, cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert ra.to_jsonl() == rb.to_jsonl()


def test_divergence_raises():
    tax, ds = separable_two_level()
    with pytest.raises(NumericalError, match="learning rate"):
        fit(ds, tax, TrainConfig(lr=1e307, epochs=5, variant="base"))


def test_fit_validates_dataset():
    tax, ds = separable_two_level()
    bad = Dataset(ds.features, ds.labels[:, :1], ds.groups, ds.ids, ds.vocab)
    with pytest.raises(ValueError, match="levels"):
        fit(bad, tax, TrainConfig(epochs=1))


@pytest.mark.parametrize("kwargs", [
    {"lr": 0}, {"momentum": 1.0}, {"batch_size": 0}, {"mask_gradient": "sometimes"},
    {"tau": -1}, {"pi": (1.0, 0.0)}, {"variant": "dh"},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_pi_length_checked():
    with pytest.raises(ValueError, match="pi has 2"):
        TrainConfig(pi=(1.0, 1.0)).level_factors(3)
