"""Prototype computation and the episodic classification loss."""

import numpy as np
import numpy.testing as npt
import pytest

from conftest import numeric_grad
from fewshot.episodes import generate_synthetic, sample_episode
from fewshot.models import ArchSpec, build_encoder
from fewshot.protonet import (
    compute_prototypes,
    episode_loss,
    episode_loss_from_embeddings,
)
from fewshot.tensor import Tape, Tensor, backward, no_grad


def test_prototypes_are_class_means():
    sup = Tensor(np.array([[1.0, 1.0], [3.0, 3.0], [0.0, 0.0], [2.0, 2.0]]))
    protos = compute_prototypes(sup, way=2, shot=2)
    npt.assert_allclose(protos.data, [[2.0, 2.0], [1.0, 1.0]])


def test_prototypes_shot_one_is_identity():
    sup = np.random.default_rng(0).standard_normal((3, 5))
    npt.assert_allclose(compute_prototypes(Tensor(sup), 3, 1).data, sup)


def test_loss_oracle_two_classes():
    # squared distances to the prototypes are (1, 2) with class 0 true:
    # loss = 1 + log(e^-1 + e^-2) = log(1 + e^-1)
    sup = Tensor(np.array([[1.0], [-np.sqrt(2.0)]]))
    query = Tensor(np.array([[0.0]]))
    res = episode_loss_from_embeddings(sup, query, np.array([0]), way=2, shot=1)
    npt.assert_allclose(res.loss_value, np.log(1.0 + np.exp(-1.0)), atol=1e-12)
    npt.assert_allclose(res.loss_value, 0.31326168751822286, atol=1e-12)


def test_identical_embeddings_give_uniform_probabilities():
    sup = Tensor(np.zeros((4, 8)))
    query = Tensor(np.zeros((6, 8)))
    labels = np.array([0, 1, 2, 3, 0, 1])
    res = episode_loss_from_embeddings(sup, query, labels, way=4, shot=1)
    npt.assert_allclose(res.loss_value, 6 * np.log(4.0), atol=1e-9)


def test_two_loss_forms_agree_over_random_instances():
    rng = np.random.default_rng(99)
    for _ in range(200):
        way = int(rng.integers(2, 6))
        shot = int(rng.integers(1, 4))
        m = int(rng.integers(1, 8))
        e = int(rng.integers(2, 10))
        sup = Tensor(rng.standard_normal((way * shot, e)) * rng.uniform(0.5, 3.0))
        query = Tensor(rng.standard_normal((m, e)))
        labels = rng.integers(0, way, size=m)
        res = episode_loss_from_embeddings(sup, query, labels, way, shot)
        assert res.form_gap <= 1e-9 * max(1.0, abs(res.loss_value))


def test_prediction_is_nearest_prototype():
    rng = np.random.default_rng(5)
    sup = Tensor(rng.standard_normal((6, 4)))
    query = Tensor(rng.standard_normal((9, 4)))
    labels = rng.integers(0, 3, size=9)
    res = episode_loss_from_embeddings(sup, query, labels, way=3, shot=2)
    protos = compute_prototypes(sup, 3, 2).data
    d = ((query.data[:, None] - protos[None]) ** 2).sum(-1)
    npt.assert_array_equal(res.predictions, d.argmin(axis=1))


def test_well_separated_embeddings_classify_perfectly():
    eye = np.eye(3) * 10.0
    sup = Tensor(np.repeat(eye, 2, axis=0))  # two shots of each one-hot direction
    query = Tensor(eye + 0.01)
    res = episode_loss_from_embeddings(sup, query, np.array([0, 1, 2]), way=3, shot=2)
    assert res.accuracy == 1.0


def test_sum_vs_mean_reduction():
    rng = np.random.default_rng(6)
    sup = Tensor(rng.standard_normal((4, 3)))
    query = Tensor(rng.standard_normal((10, 3)))
    labels = rng.integers(0, 2, size=10)
    total = episode_loss_from_embeddings(sup, query, labels, 2, 2, reduction="sum")
    mean = episode_loss_from_embeddings(sup, query, labels, 2, 2, reduction="mean")
    npt.assert_allclose(total.loss_value, 10.0 * mean.loss_value, rtol=1e-12)
    npt.assert_allclose(total.per_query_nll.sum(), total.loss_value, rtol=1e-12)


def test_euclidean_metric():
    sup = Tensor(np.array([[0.0, 0.0], [6.0, 8.0]]))
    query = Tensor(np.array([[3.0, 4.0]]))
    sq = episode_loss_from_embeddings(sup, query, np.array([0]), 2, 1, metric="squared")
    eu = episode_loss_from_embeddings(sup, query, np.array([0]), 2, 1, metric="euclidean")
    # equidistant point: both metrics give the coin-flip loss log 2
    npt.assert_allclose(sq.loss_value, np.log(2.0), atol=1e-9)
    npt.assert_allclose(eu.loss_value, np.log(2.0), atol=1e-6)
    with pytest.raises(ValueError):
        episode_loss_from_embeddings(sup, query, np.array([0]), 2, 1, metric="cosine")


def test_gradients_match_numerical():
    rng = np.random.default_rng(17)
    sup = rng.standard_normal((4, 3))
    query = rng.standard_normal((5, 3))
    labels = rng.integers(0, 2, size=5)

    def value(arrays):
        with no_grad():
            r = episode_loss_from_embeddings(Tensor(arrays[0]), Tensor(arrays[1]), labels, 2, 2)
        return r.loss_value

    ts = Tensor(sup.copy(), requires_grad=True)
    tq = Tensor(query.copy(), requires_grad=True)
    with Tape():
        res = episode_loss_from_embeddings(ts, tq, labels, 2, 2)
        backward(res.loss)
    num = numeric_grad(value, [sup, query])
    npt.assert_allclose(ts.grad, num[0], atol=1e-6)
    npt.assert_allclose(tq.grad, num[1], atol=1e-6)


def test_episode_loss_through_encoder():
    ds = generate_synthetic(4, 6, 0.05, np.random.default_rng(2))
    ep = sample_episode(ds, 3, 2, 2, np.random.default_rng(3))
    enc = build_encoder(ArchSpec(), np.random.default_rng(4))
    with Tape():
        res = episode_loss(enc, ep)
        backward(res.loss)
    assert np.isfinite(res.loss_value)
    assert 0.0 <= res.accuracy <= 1.0
    for p in enc.parameters():
        assert p.grad is not None and p.grad.shape == p.data.shape
        assert np.all(np.isfinite(p.grad))


def test_shape_validation():
    sup = Tensor(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        compute_prototypes(sup, way=3, shot=2)  # 6 rows expected
    with pytest.raises(ValueError):
        episode_loss_from_embeddings(sup, Tensor(np.zeros((2, 3))), np.array([0]), 2, 2)
