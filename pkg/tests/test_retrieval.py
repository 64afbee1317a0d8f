import numpy as np
import pytest

from core.errors import DataError
from core.retrieval import (
    RankedList,
    combined_distance,
    compute_measures,
    embed,
    format_table,
    load_pr_curves,
    rank_all,
    save_report,
)
from model import Hyperparams, MetricModel, mahalanobis_sq


def _ranked(query, order):
    return RankedList(query, list(order), np.arange(len(order), dtype=float))


def _model(a_star, channels=1):
    d = a_star.shape[0]
    return MetricModel(tuple(np.eye(d) for _ in range(channels)), a_star, Hyperparams())


def test_combined_distance_basics():
    rng = np.random.default_rng(0)
    a = [rng.normal(size=4), rng.normal(size=4)]
    assert combined_distance(a, a, np.eye(4)) == 0.0
    b = [rng.normal(size=4), rng.normal(size=4)]
    assert combined_distance(a[:1], b[:1], np.eye(4)) == pytest.approx(
        np.sum((a[0] - b[0]) ** 2)
    )
    with pytest.raises(DataError):
        combined_distance(a, b[:1], np.eye(4))


def test_combined_distance_matches_cholesky_route():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(5, 5))
    a_star = m @ m.T + 0.1 * np.eye(5)
    factor = np.linalg.cholesky(a_star).T
    a = [rng.normal(size=5) for _ in range(3)]
    b = [rng.normal(size=5) for _ in range(3)]
    expected = sum(mahalanobis_sq(x, y, factor) for x, y in zip(a, b))
    assert combined_distance(a, b, a_star) == pytest.approx(expected, abs=1e-10)


def test_embedding_distance_equals_combined_distance():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(3, 3))
    model = _model(m @ m.T + np.eye(3), channels=2)
    channels = [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]
    z = embed(channels, model)
    direct = combined_distance([c[0] for c in channels], [c[2] for c in channels], model.a_star)
    assert np.sum((z[0] - z[2]) ** 2) == pytest.approx(direct, rel=1e-10)


def test_rank_all_single_candidate_and_duplicate():
    (only,) = rank_all(np.array([[0.0], [1.0]]), ["q", "x"])[:1]
    assert only.ordered_ids == ["x"]
    x = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    ranked = rank_all(x, ["a", "b", "dup", "c"])
    assert ranked[0].ordered_ids[0] == "dup"
    assert ranked[0].distances[0] == 0.0
    assert all(r.query_id not in r.ordered_ids for r in ranked)
    assert all(np.all(np.diff(r.distances) >= 0) for r in ranked)


def test_rank_all_matches_brute_force_and_breaks_ties_by_id():
    x = np.array([[0.0], [2.0], [-2.0], [1.0], [5.0]])
    ids = ["e", "d", "c", "b", "a"]
    ranked = rank_all(x, ids)
    assert ranked[0].ordered_ids == ["b", "c", "d", "a"]
    brute = sorted(((x[k, 0] - x[3, 0]) ** 2, ids[k]) for k in range(5) if k != 3)
    assert ranked[3].ordered_ids == [name for _, name in brute]


def test_scaling_metric_keeps_orderings():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(4, 4))
    a_star = m @ m.T + np.eye(4)
    channels = [rng.normal(size=(12, 4))]
    ids = [f"s{k}" for k in range(12)]
    base = rank_all(embed(channels, _model(a_star)), ids)
    scaled = rank_all(embed(channels, _model(7.5 * a_star)), ids)
    assert [r.ordered_ids for r in base] == [r.ordered_ids for r in scaled]


def test_perfect_retrieval_two_classes_of_three():
    labels = {"a1": "A", "a2": "A", "a3": "A", "b1": "B", "b2": "B", "b3": "B"}
    ranked = []
    for q in labels:
        same = sorted(s for s in labels if labels[s] == labels[q] and s != q)
        other = sorted(s for s in labels if labels[s] != labels[q])
        ranked.append(_ranked(q, same + other))
    report = compute_measures(ranked, labels)
    assert report.nn == report.ft == report.st == report.dcg == 1.0
    assert report.e == pytest.approx(2.0 / (2.5 + 1.0))
    assert report.pr_curve[0, 1] == 1.0
    assert np.all(np.diff(report.pr_curve[:, 0]) > 0)


def test_four_shapes_with_one_inversion():
    labels = {"a1": "A", "a2": "A", "b1": "B", "b2": "B"}
    ranked = [
        _ranked("a1", ["b1", "a2", "b2"]),
        _ranked("a2", ["a1", "b1", "b2"]),
        _ranked("b1", ["b2", "a1", "a2"]),
        _ranked("b2", ["b1", "a1", "a2"]),
    ]
    report = compute_measures(ranked, labels)
    assert report.nn == 0.75
    assert report.ft == 0.75
    assert report.st == 1.0
    assert report.e == 0.5
    assert report.dcg == 1.0
    assert report.per_query.loc[0, "NN"] == 0.0


def test_dcg_discounts_late_hits():
    labels = {"q": "A", "x": "A", "y": "B", "z": "B"}
    report = compute_measures([_ranked("q", ["y", "z", "x"])], labels)
    assert report.dcg == pytest.approx(1.0 / np.log2(3))
    assert report.ft == 0.0 and report.st == 0.0


def test_singleton_class_counts_for_nn_only(caplog):
    labels = {"a1": "A", "a2": "A", "s": "S"}
    ranked = [
        _ranked("a1", ["a2", "s"]),
        _ranked("a2", ["a1", "s"]),
        _ranked("s", ["a1", "a2"]),
    ]
    report = compute_measures(ranked, labels)
    assert report.nn == pytest.approx(2 / 3)
    assert report.ft == 1.0
    assert "no same-class shape" in caplog.text


def test_random_ranking_is_at_chance():
    rng = np.random.default_rng(4)
    labels = {f"s{k:03d}": f"c{k // 20}" for k in range(600)}
    ids = np.array(list(labels))
    values = []
    for _ in range(10):
        ranked = [
            _ranked(q, rng.permutation(ids[ids != q])) for q in ids
        ]
        report = compute_measures(ranked, labels)
        assert report.ft <= report.st
        values.append(report.nn)
    assert np.mean(values) == pytest.approx(19 / 599, abs=0.02)


def test_report_artifacts(tmp_path):
    labels = {"a1": "A", "a2": "A", "b1": "B", "b2": "B"}
    ranked = [_ranked(q, [s for s in sorted(labels) if s != q]) for q in labels]
    report = compute_measures(ranked, labels, name="MfML")
    baseline = compute_measures(ranked, labels, name="ShapeDNA")
    path = save_report(report, tmp_path, [baseline])
    assert path.name == "report.json"
    curves = load_pr_curves(tmp_path / "pr.csv")
    assert list(curves) == ["MfML", "ShapeDNA"]
    assert curves["MfML"].shape == (21, 2)
    table = format_table([report, baseline])
    assert table.splitlines()[0].split() == ["Method", "NN", "FT", "ST", "E", "DCG"]
    assert "50.0" in table
