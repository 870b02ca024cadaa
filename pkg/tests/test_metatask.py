"""Auxiliary-objective composition: weighting, skipping, gradient additivity."""

import numpy as np
import numpy.testing as npt
import pytest

from fewshot.episodes import generate_synthetic, sample_episode
from fewshot.metatask import (
    ReconstructionTask,
    composite_loss,
    separability_check,
)
from fewshot.models import ArchSpec, build_decoder, build_encoder, decode, encode
from fewshot.protonet import episode_loss
from fewshot.tensor import Tape, Tensor, backward, no_grad


def scalar(v):
    return Tensor(np.asarray(v))


def test_composite_weighting_oracle():
    total, breakdown = composite_loss(
        [scalar(0.3133)], [(ReconstructionTaskStub(0.1), scalar(0.5))]
    )
    npt.assert_allclose(float(total.data), 0.3633, atol=1e-12)
    assert breakdown.task == pytest.approx(0.3133)
    assert breakdown.terms[0].raw == pytest.approx(0.5)
    assert breakdown.terms[0].weighted == pytest.approx(0.05)
    assert breakdown.total == pytest.approx(0.3633)


def test_composite_two_terms():
    total, _ = composite_loss(
        [scalar(1.0)],
        [(ReconstructionTaskStub(0.1), scalar(1.0)), (ReconstructionTaskStub(0.05), scalar(2.0))],
    )
    npt.assert_allclose(float(total.data), 1.2, atol=1e-12)


def test_composite_multiple_task_losses():
    total, breakdown = composite_loss([scalar(1.0), scalar(2.5)], [])
    npt.assert_allclose(float(total.data), 3.5)
    assert breakdown.task == pytest.approx(3.5)


def test_skipped_term_contributes_nothing():
    base = scalar(2.0)
    total, breakdown = composite_loss([base], [(ReconstructionTaskStub(0.0), None)])
    assert total is base  # not even an add node
    assert breakdown.terms[0].raw is None
    assert breakdown.total == pytest.approx(2.0)


def test_skip_requires_zero_weight():
    with pytest.raises(ValueError):
        composite_loss([scalar(1.0)], [(ReconstructionTaskStub(0.5), None)])


def test_negative_weight_rejected():
    arch = ArchSpec()
    dec = build_decoder(arch, "shallow", np.random.default_rng(0))
    with pytest.raises(ValueError):
        ReconstructionTask(dec, lam=-0.1)
    with pytest.raises(ValueError):
        composite_loss([scalar(1.0)], [(ReconstructionTaskStub(-1.0), scalar(1.0))])


def test_empty_task_list_rejected():
    with pytest.raises(ValueError):
        composite_loss([], [])


class ReconstructionTaskStub:
    """Bare carrier of a name and weight for composite_loss tests."""

    name = "autoencoder"

    def __init__(self, lam):
        self.lam = lam


def make_episode_setup(seed=0):
    rng = np.random.default_rng(seed)
    arch = ArchSpec()
    enc = build_encoder(arch, rng)
    dec = build_decoder(arch, "shallow", rng)
    ds = generate_synthetic(4, 6, 0.05, np.random.default_rng(seed + 1))
    ep = sample_episode(ds, 3, 1, 2, np.random.default_rng(seed + 2))
    return enc, dec, ep


def test_reconstruction_loss_is_pixel_mse():
    enc, dec, ep = make_episode_setup()
    task = ReconstructionTask(dec, lam=1.0)
    images = Tensor(ep.support_images)
    with no_grad():
        loss = task.loss(images, enc)
        recon = decode(dec, encode(enc, images))
    expect = ((recon.data - ep.support_images) ** 2).mean()
    npt.assert_allclose(float(loss.data), expect, rtol=1e-12)


def test_reconstruction_with_shared_embeddings_matches():
    enc, dec, ep = make_episode_setup(3)
    task = ReconstructionTask(dec, lam=1.0)
    images = Tensor(ep.support_images)
    with no_grad():
        own = task.loss(images, enc)
        emb = encode(enc, images)
        shared = task.loss(images, enc, embeddings=emb)
    npt.assert_allclose(float(own.data), float(shared.data), rtol=1e-14)


def test_loss_ignores_label_permutation():
    # an auxiliary objective must be label-free: shuffling which images
    # belong to which class cannot change it when the image set is fixed
    enc, dec, ep = make_episode_setup(4)
    task = ReconstructionTask(dec, lam=1.0)
    with no_grad():
        a = task.loss(Tensor(ep.support_images), enc)
        perm = np.random.default_rng(0).permutation(len(ep.support_images))
        b = task.loss(Tensor(ep.support_images[perm]), enc)
    npt.assert_allclose(float(a.data), float(b.data), rtol=1e-12)


def test_composite_gradients_decompose_additively():
    enc, dec, ep = make_episode_setup(7)
    task = ReconstructionTask(dec, lam=0.3)
    images = ep.support_images

    def make_graph():
        res = episode_loss(enc, ep)
        raw = task.loss(Tensor(images), enc)
        return res.loss, [(task.lam, raw)]

    params = enc.parameters() + dec.parameters()
    report = separability_check(make_graph, params, tol=1e-8)
    assert report.passed, f"max additivity gap {report.max_abs_diff:.3e}"


def test_separability_restores_existing_grads():
    enc, dec, ep = make_episode_setup(8)
    task = ReconstructionTask(dec, lam=0.5)
    p0 = enc.parameters()[0]
    marker = np.full_like(p0.data, 7.0)
    p0.grad = marker.copy()

    def make_graph():
        res = episode_loss(enc, ep)
        return res.loss, [(task.lam, task.loss(Tensor(ep.support_images), enc))]

    separability_check(make_graph, enc.parameters())
    npt.assert_array_equal(p0.grad, marker)


def test_gradients_flow_to_decoder_and_encoder():
    enc, dec, ep = make_episode_setup(9)
    task = ReconstructionTask(dec, lam=1.0)
    with Tape():
        backward(task.loss(Tensor(ep.support_images), enc))
    for p in enc.parameters() + dec.parameters():
        assert p.grad is not None
        assert np.all(np.isfinite(p.grad))
        assert np.any(p.grad != 0.0)
