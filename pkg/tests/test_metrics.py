"""Running statistics and the classification report."""

import numpy as np
import numpy.testing as npt
import pytest

from fewshot.metrics import (
    PredictionRecord,
    RunningStats,
    classification_report,
    format_report,
)


def test_running_stats_match_numpy():
    rng = np.random.default_rng(0)
    for n in (1, 2, 10, 500):
        xs = rng.standard_normal(n) * rng.uniform(0.1, 40.0)
        st = RunningStats()
        for x in xs:
            st.push(x)
        assert st.n == n
        npt.assert_allclose(st.mean, xs.mean(), rtol=1e-12)
        if n > 1:
            npt.assert_allclose(st.std, xs.std(ddof=1), rtol=1e-10)
        else:
            assert st.std == 0.0


def test_running_stats_large_offset_stability():
    # a naive sum-of-squares accumulator loses all precision here
    st = RunningStats()
    xs = 1e9 + np.array([0.0, 1.0, 2.0])
    for x in xs:
        st.push(x)
    npt.assert_allclose(st.std, 1.0, rtol=1e-6)


def records_from(episodes):
    out = []
    for e, (trues, preds) in enumerate(episodes):
        for t, p in zip(trues, preds):
            out.append(PredictionRecord(episode=e, true_class=t, predicted_class=p))
    return out


def test_report_hand_oracle():
    recs = records_from(
        [
            ("a a b".split(), "a b b".split()),
            ("a b b".split(), "a b a".split()),
        ]
    )
    rep = classification_report(recs)
    for cls in ("a", "b"):
        assert rep["classes"][cls]["precision"] == pytest.approx(2 / 3)
        assert rep["classes"][cls]["recall"] == pytest.approx(2 / 3)
        assert rep["classes"][cls]["f1"] == pytest.approx(2 / 3)
        assert rep["classes"][cls]["support"] == 3
    assert rep["accuracy"] == pytest.approx(4 / 6)
    assert rep["episodic_accuracy"] == pytest.approx(4 / 6)
    assert rep["macro"]["f1"] == pytest.approx(2 / 3)
    assert rep["weighted"]["f1"] == pytest.approx(2 / 3)
    assert rep["episodes"] == 2 and rep["total"] == 6


def test_perfect_predictions():
    recs = records_from([("x y z".split(), "x y z".split())])
    rep = classification_report(recs)
    assert rep["accuracy"] == 1.0
    assert all(v["f1"] == 1.0 for v in rep["classes"].values())


def test_never_predicted_class_has_zero_precision_without_error():
    recs = records_from([(["a", "b"], ["a", "a"])])
    rep = classification_report(recs)
    assert rep["classes"]["b"]["precision"] == 0.0
    assert rep["classes"]["b"]["recall"] == 0.0
    assert rep["classes"]["b"]["f1"] == 0.0


def test_micro_accuracy_equals_episodic_mean_when_balanced():
    # equal query counts per episode make the two figures coincide
    rng = np.random.default_rng(4)
    episodes = []
    classes = ["c0", "c1", "c2"]
    for _ in range(20):
        trues = [classes[i % 3] for i in range(9)]
        preds = [t if rng.random() < 0.7 else classes[int(rng.integers(3))] for t in trues]
        episodes.append((trues, preds))
    rep = classification_report(records_from(episodes))
    npt.assert_allclose(rep["accuracy"], rep["episodic_accuracy"], rtol=1e-12)


def test_unbalanced_micro_differs_from_episodic():
    recs = records_from(
        [
            (["a"] * 9 + ["b"], ["a"] * 9 + ["a"]),  # 90% on 10 queries
            (["a", "b"], ["b", "a"]),  # 0% on 2 queries
        ]
    )
    rep = classification_report(recs)
    assert rep["accuracy"] == pytest.approx(9 / 12)
    assert rep["episodic_accuracy"] == pytest.approx(0.45)


def test_weighted_average_uses_support():
    recs = records_from([(["a", "a", "a", "b"], ["a", "a", "a", "a"])])
    rep = classification_report(recs)
    w = rep["weighted"]["recall"]
    npt.assert_allclose(w, (1.0 * 3 + 0.0 * 1) / 4)


def test_format_report_layout():
    recs = records_from([(["cls-a", "cls-b"], ["cls-a", "cls-b"])])
    text = format_report(classification_report(recs))
    assert "precision" in text and "recall" in text and "support" in text
    assert "cls-a" in text and "macro avg" in text and "weighted avg" in text
    assert "episodic accuracy" in text


def test_empty_records_rejected():
    with pytest.raises(ValueError):
        classification_report([])
