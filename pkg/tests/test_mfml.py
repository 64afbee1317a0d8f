from dataclasses import replace

import numpy as np
import pytest
import torch

from core.errors import ConfigError, NumericError, TrainingError
from core.retrieval import embed, nearest_neighbor_accuracy
from core.synthetic import complementary_views, gaussian_views
from core.dataset import make_split
from core.pipeline import labels_manifest
from model import (
    Hyperparams,
    MetricModel,
    PairConstraintSet,
    consensus_metric,
    gradient_step,
    hinge_slope,
    logdet_divergence,
    mahalanobis_sq,
    objective,
    objective_gradient,
    sample_pairs,
    smoothed_hinge,
    train,
    train_single_metric,
    update_consensus,
)
from model.mfml import _channel_objective, _channels, _Consensus, ridge_pinv_transpose


def _random_spd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * 1e-2 * np.eye(n)


def _model(Ls, hyper):
    model = MetricModel(tuple(Ls), np.eye(Ls[0].shape[1]), hyper)
    return update_consensus(model)


# ---------------------------------------------------------------------------
# scalar pieces


def test_smoothed_hinge_values():
    assert smoothed_hinge(0.0, 4.0) == pytest.approx(np.log(2) / 4)
    assert smoothed_hinge(100.0, 4.0) == pytest.approx(100.0, abs=1e-12)
    assert smoothed_hinge(-1000.0, 4.0) == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(smoothed_hinge(1e6, 4.0))
    with pytest.raises(ConfigError):
        smoothed_hinge(1.0, 0.0)


def test_hinge_slope_is_sigmoid():
    assert hinge_slope(0.0, 4.0) == pytest.approx(0.5)
    x = torch.linspace(-2, 2, 8, dtype=torch.float64, requires_grad=True)
    smoothed_hinge(x, 3.0).sum().backward()
    torch.testing.assert_close(x.grad, hinge_slope(x.detach(), 3.0))


def test_mahalanobis_with_identity_is_squared_euclidean():
    x, y = np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 1.0])
    assert mahalanobis_sq(x, y, np.eye(3)) == pytest.approx(9.0)
    assert mahalanobis_sq(x, x, np.diag([2.0, 3.0, 4.0])) == 0.0


# ---------------------------------------------------------------------------
# LogDet divergence


def test_logdet_identities():
    n = 30
    a = _random_spd(np.random.default_rng(0), n)
    assert abs(logdet_divergence(a, a)) < 1e-9
    assert logdet_divergence(2 * np.eye(n), np.eye(n)) == pytest.approx(
        n * (1 - np.log(2)), abs=1e-9
    )


def test_logdet_is_nonnegative_on_random_pairs():
    rng = np.random.default_rng(1)
    values = [logdet_divergence(_random_spd(rng, 5), _random_spd(rng, 5)) for _ in range(1000)]
    assert min(values) >= -1e-9


def test_logdet_regularizes_singular_first_argument():
    singular = np.diag([1.0, 0.0, 1.0])
    assert np.isfinite(logdet_divergence(singular, np.eye(3), eps=1e-3))
    with pytest.raises(NumericError):
        logdet_divergence(np.eye(3), singular)


# ---------------------------------------------------------------------------
# objective and gradient


def _instance(seed):
    rng = np.random.default_rng(seed)
    n, d, m = 20, 5, 2
    features = [rng.normal(size=(n, d)) for _ in range(m)]
    labels = rng.integers(0, 3, size=n)
    labels[:3] = [0, 1, 2]
    pairs = sample_pairs(labels, neg_ratio=0, seed=seed)
    hyper = Hyperparams(
        tau=rng.uniform(1.5, 4.0),
        rho=rng.uniform(0.5, 8.0),
        beta=rng.uniform(0.01, 1.0),
        lam=tuple(rng.uniform(0.0, 0.1, size=m)),
        eps=10 ** rng.uniform(-4, -2),
    )
    Ls = [np.eye(d) + 0.3 * rng.normal(size=(d, d)) for _ in range(m)]
    model = _model(Ls, hyper)
    return features, pairs, model


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    features, pairs, model = _instance(seed)
    h = 1e-6
    for v in range(model.num_channels):
        analytic = objective_gradient(features, pairs, model, v)
        numeric = np.zeros_like(analytic)
        for idx in np.ndindex(analytic.shape):
            plus, minus = [L.copy() for L in model.L], [L.copy() for L in model.L]
            plus[v][idx] += h
            minus[v][idx] -= h
            f_plus = objective(features, pairs, MetricModel(tuple(plus), model.a_star, model.hyper))
            f_minus = objective(features, pairs, MetricModel(tuple(minus), model.a_star, model.hyper))
            numeric[idx] = (f_plus - f_minus) / (2 * h)
        assert np.abs(analytic - numeric).max() < 1e-4


def _numeric_gradient(features, pairs, model, v, h=1e-6):
    numeric = np.zeros_like(model.L[v])
    for idx in np.ndindex(numeric.shape):
        plus, minus = [L.copy() for L in model.L], [L.copy() for L in model.L]
        plus[v][idx] += h
        minus[v][idx] -= h
        f_plus = objective(features, pairs, replace(model, L=tuple(plus)))
        f_minus = objective(features, pairs, replace(model, L=tuple(minus)))
        numeric[idx] = (f_plus - f_minus) / (2 * h)
    return numeric


NO_PAIRS = PairConstraintSet([], [], [])


@pytest.mark.parametrize(
    "term, overrides",
    [
        ("hinge", {"beta": 0.0, "lam": (0.0, 0.0)}),
        ("logdet", {"beta": 1.0, "lam": (0.0, 0.0)}),
        ("frobenius", {"beta": 0.0, "lam": (0.1, 0.05)}),
    ],
)
def test_each_objective_term_matches_finite_differences(term, overrides):
    features, pairs, model = _instance(11)
    if term != "hinge":
        pairs = NO_PAIRS
    model = _model(model.L, Hyperparams(**{**vars(model.hyper), **overrides}))
    for v in range(model.num_channels):
        analytic = objective_gradient(features, pairs, model, v)
        assert np.abs(analytic).max() > 1e-3
        assert np.abs(analytic - _numeric_gradient(features, pairs, model, v)).max() < 1e-4


def test_step_without_pairs_or_consensus_only_shrinks():
    features, _, model = _instance(13)
    hyper = Hyperparams(beta=0.0, lam=(0.05,), learning_rate=0.1)
    model = replace(model, hyper=hyper)
    step = gradient_step(features, NO_PAIRS, model, 1)
    assert step.accepted and step.learning_rate == 0.1
    np.testing.assert_allclose(step.L, (1 - 2 * 0.1 * 0.05) * model.L[1], rtol=1e-12)


def test_gradient_matches_autograd():
    features, pairs, model = _instance(42)
    hyper = model.hyper
    consensus = _Consensus.of(torch.as_tensor(model.a_star))
    chans = _channels(features, pairs, hyper)
    for v, ch in enumerate(chans):
        L = torch.tensor(model.L[v], requires_grad=True)
        _channel_objective(L, ch, hyper, consensus).backward()
        np.testing.assert_allclose(
            objective_gradient(features, pairs, model, v), L.grad.numpy(), atol=1e-8
        )


def test_ridge_pseudo_inverse_matches_direct_solve():
    L = torch.as_tensor(np.random.default_rng(3).normal(size=(6, 6)))
    direct = L @ torch.linalg.inv(L.T @ L + 1e-3 * torch.eye(6, dtype=L.dtype))
    torch.testing.assert_close(ridge_pinv_transpose(L, 1e-3), direct)


def test_equal_metrics_have_zero_consensus_penalty():
    features, pairs, model = _instance(5)
    L = model.L[0]
    tied = _model([L, L], model.hyper)
    unregularized = _model([L, L], Hyperparams(**{**vars(model.hyper), "beta": 0.0}))
    assert objective(features, pairs, tied) == pytest.approx(
        objective(features, pairs, unregularized), rel=1e-10
    )


def test_gradient_step_does_not_increase_channel_objective():
    features, pairs, model = _instance(7)
    before = objective(features, pairs, model)
    step = gradient_step(features, pairs, model, 0)
    moved = MetricModel((step.L, model.L[1]), model.a_star, model.hyper)
    assert objective(features, pairs, moved) <= before
    assert step.accepted == (step.learning_rate > 0)


# ---------------------------------------------------------------------------
# training


def _split_views(views, seed):
    split = make_split(labels_manifest(views[0]), 0.6, seed)
    train_ids, test_ids = split.split("train"), split.split("test")
    train_sets = [v.subset(train_ids) for v in views]
    test_sets = [v.subset(test_ids) for v in views]
    return train_sets, test_sets


@pytest.mark.parametrize("seed", range(50))
def test_training_trace_never_increases(seed):
    views = gaussian_views(3, 10, dim=6, separability=(3.0, 2.0), seed=seed)
    pairs = sample_pairs(views[0].labels, seed=seed)
    model = train([v.vectors for v in views], pairs, Hyperparams(max_iters=20), seed)
    assert np.all(np.diff(model.trace) <= 0)
    standardized = [model.standardize(v.vectors, k) for k, v in enumerate(views)]
    assert objective(standardized, pairs, model) == pytest.approx(model.trace[-1], rel=1e-10)


def test_consensus_is_regularized_mean_after_training():
    views = gaussian_views(3, 10, dim=5, seed=0)
    pairs = sample_pairs(views[0].labels)
    hyper = Hyperparams(max_iters=10, eps=1e-3)
    model = train([v.vectors for v in views], pairs, hyper)
    expected = 1e-3 * np.eye(5) + sum(L.T @ L for L in model.L) / len(model.L)
    assert np.abs(model.a_star - expected).max() < 1e-12
    np.testing.assert_allclose(model.a_star, model.a_star.T, atol=0)
    assert np.linalg.eigvalsh(model.a_star).min() > 0


@pytest.mark.parametrize("seed", range(5))
def test_single_channel_without_consensus_matches_single_metric(seed):
    (view,) = gaussian_views(3, 12, dim=5, separability=(3.0,), seed=seed)
    pairs = sample_pairs(view.labels, seed=seed)
    hyper = Hyperparams(beta=0.0, max_iters=25)
    joint = train([view.vectors], pairs, hyper, seed)
    single = train_single_metric(view.vectors, pairs, hyper, seed)
    assert joint.trace == single.trace
    np.testing.assert_array_equal(joint.L[0], single.L[0])


def test_complementary_channels_beat_single_channel_baselines():
    learned, baseline = [], []
    for seed in range(10):
        views = complementary_views(per_class=30, dim=30, separability=6.0, seed=seed)
        train_sets, test_sets = _split_views(views, seed)
        pairs = sample_pairs(train_sets[0].labels, seed=seed)
        model = train([v.vectors for v in train_sets], pairs, Hyperparams(), seed)
        learned.append(
            nearest_neighbor_accuracy(
                embed([v.vectors for v in train_sets], model),
                train_sets[0].labels,
                embed([v.vectors for v in test_sets], model),
                test_sets[0].labels,
            )
        )
        baseline.append(
            max(
                nearest_neighbor_accuracy(tr.vectors, tr.labels, te.vectors, te.labels)
                for tr, te in zip(train_sets, test_sets)
            )
        )
    assert np.mean(learned) >= 0.95
    assert np.mean(baseline) <= 0.80


def test_permuted_training_labels_fall_to_chance():
    accuracy = []
    for seed in range(10):
        views = complementary_views(per_class=30, dim=30, separability=6.0, seed=seed)
        train_sets, test_sets = _split_views(views, seed)
        shuffled = np.random.default_rng(seed).permutation(train_sets[0].labels).tolist()
        pairs = sample_pairs(shuffled, seed=seed)
        model = train([v.vectors for v in train_sets], pairs, Hyperparams(max_iters=50), seed)
        accuracy.append(
            nearest_neighbor_accuracy(
                embed([v.vectors for v in train_sets], model),
                shuffled,
                embed([v.vectors for v in test_sets], model),
                test_sets[0].labels,
            )
        )
    assert np.mean(accuracy) == pytest.approx(1 / 3, abs=0.10)


def test_training_needs_two_classes_and_matching_channels():
    x = np.random.default_rng(0).normal(size=(6, 3))
    one_class = sample_pairs(["a"] * 6)
    with pytest.raises(TrainingError, match="two classes"):
        train([x], one_class, Hyperparams())
    pairs = sample_pairs(list("aabbcc"))
    with pytest.raises(TrainingError):
        train([x, x[:, :2]], pairs, Hyperparams())
    with pytest.raises(ConfigError):
        train([x, x], pairs, Hyperparams(lam=(0.1, 0.1, 0.1)))


def test_model_json_round_trip(tmp_path):
    views = gaussian_views(2, 6, dim=3, seed=1)
    model = train(
        [v.vectors for v in views], sample_pairs(views[0].labels), Hyperparams(max_iters=5),
        channels=["view0", "view1"],
    )
    loaded = MetricModel.load(model.save(tmp_path / "model.json"))
    np.testing.assert_array_equal(loaded.a_star, model.a_star)
    np.testing.assert_array_equal(loaded.L[1], model.L[1])
    assert loaded.hyper == model.hyper
    assert loaded.channels == ("view0", "view1")
    trace = model.save_trace(tmp_path / "trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,objective"
    assert len(trace) == len(model.trace) + 1


def test_consensus_metric_of_identities():
    a_star = consensus_metric([np.eye(3), np.eye(3)], 1e-3)
    np.testing.assert_allclose(a_star.numpy(), (1 + 1e-3) * np.eye(3))


# ---------------------------------------------------------------------------
# pair sampling


def test_sample_pairs_two_by_two():
    pairs = sample_pairs(["a", "a", "b", "b"], neg_ratio=0)
    assert pairs.num_positive == 2
    assert pairs.num_negative == 4
    assert np.all(pairs.i < pairs.j)


def test_sample_pairs_cap_and_ratio():
    labels = ["a"] * 6 + ["b"] * 6
    pairs = sample_pairs(labels, per_class_cap=5, neg_ratio=2.0, seed=3)
    assert pairs.num_positive == 10
    assert pairs.num_negative == 20
    again = sample_pairs(labels, per_class_cap=5, neg_ratio=2.0, seed=3)
    np.testing.assert_array_equal(pairs.i, again.i)
    np.testing.assert_array_equal(pairs.j, again.j)


def test_singleton_class_contributes_no_positive(caplog):
    pairs = sample_pairs(["a", "a", "b"], neg_ratio=0)
    assert pairs.num_positive == 1
    assert pairs.num_negative == 2
    assert "1 member" in caplog.text


def test_pair_constraint_validation():
    with pytest.raises(ConfigError):
        PairConstraintSet([1], [1], [1])
    with pytest.raises(ConfigError):
        PairConstraintSet([0], [1], [0.5])
