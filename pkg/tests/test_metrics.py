import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cpe.metrics import (
    RunningMoments,
    confusion_matrix,
    feature_stats,
    format_mean_std,
    groupwise_f1,
    per_class_f1,
    top1_accuracy,
)
from cpe.model import ClassGroups, PseudoLabelRecord, partition_classes


def test_perfect_pseudo_labels():
    g = partition_classes(9)
    y = np.repeat(np.arange(9), 5)
    rep = groupwise_f1(np.stack([y, y, y]), y, g)
    for name in ("head", "medium", "tail", "overall"):
        assert getattr(rep, name) == [1.0, 1.0, 1.0]


def test_constant_prediction_on_balanced_pair():
    f1 = per_class_f1([0, 0, 0, 0], [0, 0, 1, 1], 2)
    # precision 1/2, recall 1 for class 0; class 1 never predicted
    assert f1[0] == pytest.approx(2 / 3, abs=1e-15)
    assert f1[1] == 0.0


def test_absent_classes_excluded_from_group_mean():
    g = ClassGroups(head=(0,), medium=(1, 2), tail=(3,))
    rep = groupwise_f1([[0, 1, 1]], [0, 1, 1], g)
    assert rep.medium == [1.0]  # class 2 absent and unpredicted
    assert np.isnan(rep.tail[0])


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_record_order_is_irrelevant(seed):
    rng = np.random.default_rng(seed)
    g = partition_classes(9)
    y = rng.integers(0, 9, 60)
    pl = rng.integers(0, 9, (3, 60))
    perm = rng.permutation(60)
    a = groupwise_f1(pl, y, g)
    b = groupwise_f1(pl[:, perm], y[perm], g)
    assert a.overall == b.overall and a.tail == b.tail


def test_records_input_form():
    g = partition_classes(3)
    recs = [[PseudoLabelRecord(i, e, p, 0.9, True, t) for i, (p, t) in enumerate(zip(pl, [0, 1, 2]))]
            for e, pl in enumerate([[0, 1, 2], [0, 0, 2]])]
    rep = groupwise_f1(recs, None, g)
    assert rep.overall[0] == 1.0 and rep.overall[1] < 1.0
    assert rep.best_expert() == 0


def test_empty_records_error():
    with pytest.raises(ValueError):
        groupwise_f1([], [], partition_classes(9))


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_single_class_group_is_binary_f1(pairs):
    # class 0 is the head group on its own; everything else is "not 0"
    g = ClassGroups(head=(0,), medium=(1,), tail=(2,))
    pred = [0 if p else 1 for p, _ in pairs]
    true = [0 if t else 2 for _, t in pairs]
    tp = sum(p and t for p, t in pairs)
    fp = sum(p and not t for p, t in pairs)
    fn = sum(t and not p for p, t in pairs)
    rep = groupwise_f1([pred], true, g)
    if tp + fp + fn == 0:
        assert np.isnan(rep.head[0])
    else:
        assert rep.head[0] == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-15)


def test_top1():
    assert top1_accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
    assert top1_accuracy([1, 2], [1, 2]) == 1.0
    assert top1_accuracy([1, 2], [0, 0]) == 0.0
    with pytest.raises(ValueError):
        top1_accuracy([1, 2, 3], [1, 2])


def test_confusion_matrix():
    assert np.array_equal(confusion_matrix([0, 1, 2], [0, 1, 2], 3), np.eye(3, dtype=int))
    cm = confusion_matrix([5], [2], 6)
    assert cm[2, 5] == 1 and cm.sum() == 1
    y = np.repeat(np.arange(4), [3, 1, 4, 2])
    cm = confusion_matrix(np.random.default_rng(0).integers(0, 4, 10), y, 4)
    assert cm.sum(axis=1).tolist() == [3, 1, 4, 2]


def _stats(x, labels, g=None):
    g = g or partition_classes(3)
    return feature_stats(None, [(x, labels, "unlabeled")], g, features_only=True)


def test_constant_features():
    s = _stats(np.full((5, 3), 2.5), [0] * 5)
    assert np.all(s.std[("head", "unlabeled")] == 0)
    assert np.all(s.mean[("head", "unlabeled")] == 2.5)


def test_two_point_features():
    s = _stats(np.array([[-1.0, 1.0], [1.0, -1.0]]), [2, 2])
    assert np.allclose(s.mean[("tail", "unlabeled")], 0)
    assert np.allclose(s.std[("tail", "unlabeled")], 1)


def test_streaming_matches_two_pass():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, (1000, 6))
    acc = RunningMoments(6)
    for chunk in np.array_split(x, 7):
        acc.update(chunk)
    mu = x.sum(0) / len(x)
    sd = np.sqrt(((x - mu) ** 2).sum(0) / len(x))
    np.testing.assert_allclose(acc.mean, mu, atol=1e-6)
    np.testing.assert_allclose(acc.std, sd, atol=1e-6)


def test_feature_stats_split_by_origin():
    torch.manual_seed(0)
    from cpe.model import build_model
    m = build_model({"kind": "mlp", "in_dim": 4, "hidden": [5]}, 9)
    x = torch.randn(30, 4)
    y = np.arange(30) % 9
    s = feature_stats(m, [(x[:10], y[:10], "labeled"), (x[10:], y[10:], "unlabeled")], m.groups)
    assert set(s.mean) == {(g, o) for g in ("head", "medium", "tail") for o in ("labeled", "unlabeled")}
    assert all((v >= 0).all() for v in s.std.values())
    assert sum(s.count.values()) == 30


def test_format_mean_std():
    assert format_mean_std([0.8, 0.8, 0.8]) == "0.800±0.000"
    assert format_mean_std([1.0, 3.0]) == "2.000±1.000"
