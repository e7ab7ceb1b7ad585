import math

import numpy as np
import pytest

from conftest import randomize_biases, tiny_batch, tiny_model
from pvdalab.model import ArchConfig, ManModel, clip_count, pvda_objective, sample_clips
from pvdalab.nn import grad_check, softmax, softmax_cross_entropy
from pvdalab.rng import make_rng


def loss_check_fn(model, xs, ys, xt, gamma, alpha, clips):
    """Finite differences run on the objective; discriminator gradients are
    the ascent direction, so their sign is flipped back for the check."""

    def fn(p):
        res = model.loss(p, xs, ys, xt, gamma, alpha, clips)
        grads = {k: (-g if model.is_discriminator(k) else g) for k, g in res.grads.items()}
        return res.objective, grads

    return fn


def test_identity_extractor_passes_frames():
    model = ManModel(3, 2, 2, 3, ArchConfig(embed_dim=3, extractor_hidden=[], extractor_final_relu=False))
    params = model.init_params(0)
    for m in range(2):
        params[f"extractor.{m}.0.weight"] = np.eye(3)
        params[f"extractor.{m}.0.bias"] = np.zeros(3)
    x = np.random.default_rng(0).normal(size=(5, 2, 2, 3))
    feats, _ = model.extract(params, x)
    np.testing.assert_array_equal(feats, x)
    again, _ = model.extract(params, x)
    np.testing.assert_array_equal(feats, again)


def test_single_frame_clip():
    model = ManModel(3, 1, 2, 3, ArchConfig(embed_dim=4, fusion="avgpool"))
    params = model.init_params(0)
    feats, _ = model.extract(params, np.ones((1, 1, 2, 3)))
    assert feats.shape == (1, 1, 2, 4)
    with pytest.raises(Exception):
        ManModel(3, 1, 2, 3, ArchConfig())


def test_shape_mismatch_rejected():
    model = tiny_model()
    params = model.init_params(0)
    with pytest.raises(ValueError):
        model.extract(params, np.zeros((1, 3, 2, 3)))


def test_clip_counts():
    assert clip_count(4, 2) == 5
    assert clip_count(4, 3) == 4
    assert clip_count(4, 4) == 1
    assert clip_count(2, 2) == 1
    clips = sample_clips(4, make_rng(0, 1))
    assert {r: len(c) for r, c in clips.items()} == {2: 5, 3: 4, 4: 1}
    for r, c in clips.items():
        assert len({tuple(row) for row in c}) == len(c)
        assert np.all(np.diff(c, axis=1) > 0)
    big = sample_clips(30, make_rng(0, 1))
    assert all(len(c) == min(math.comb(30, r), 5) for r, c in big.items())
    with pytest.raises(ValueError):
        sample_clips(1, make_rng(0, 1))


def test_clip_sampling_deterministic():
    a = sample_clips(6, make_rng(3, 9))
    b = sample_clips(6, make_rng(3, 9))
    assert all(np.array_equal(a[r], b[r]) for r in a)


def test_two_frame_fusion_is_single_relation():
    model = tiny_model(num_modalities=1)
    params = randomize_biases(model.init_params(1), np.random.default_rng(0))
    clips = model.sample_clips(make_rng(0, 0))
    assert list(clips) == [2] and clips[2].tolist() == [[0, 1]]
    x = np.random.default_rng(2).normal(size=(3, 2, 1, 3))
    feats, _ = model.extract(params, x)
    fused, _ = model.fuse(params, feats, clips)
    expect, _ = model.relations[2][0].forward(params, np.concatenate([feats[:, 0, 0], feats[:, 1, 0]], axis=1))
    np.testing.assert_allclose(fused, expect, rtol=1e-14)


def test_zero_relation_gives_zero_fusion():
    model = tiny_model(frames=4)
    params = model.init_params(0)
    for k in params:
        if k.startswith("relation."):
            params[k] = np.zeros_like(params[k])
    clips = model.sample_clips(make_rng(0, 0))
    _, fused = model.forward(params, np.random.default_rng(0).normal(size=(2, 4, 2, 3)), clips)
    np.testing.assert_array_equal(fused, 0.0)


def test_fusion_additive_over_modalities():
    two = tiny_model(num_modalities=2, frames=4)
    one = tiny_model(num_modalities=1, frames=4)
    params = two.init_params(3)  # zero biases: a relation MLP maps zero input to zero
    clips = two.sample_clips(make_rng(1, 1))
    feats = np.random.default_rng(4).normal(size=(3, 4, 2, 4))
    feats[:, :, 1] = 0.0
    f2, _ = two.fuse(params, feats, clips)
    f1, _ = one.fuse(params, feats[:, :, :1], clips)
    np.testing.assert_allclose(f2, f1, rtol=1e-13, atol=1e-13)


def test_zero_classifier_is_uniform():
    model = tiny_model()
    params = model.init_params(0)
    for k in params:
        if k.startswith("classifier."):
            params[k] = np.zeros_like(params[k])
    logits = model.classify(params, np.random.default_rng(0).normal(size=(4, model.fused_dim)))
    np.testing.assert_allclose(softmax(logits), 1.0 / 3)


def test_discriminator_symmetric():
    model = tiny_model()
    params = model.init_params(0)
    f = np.random.default_rng(0).normal(size=(2, 4))
    np.testing.assert_array_equal(model.discriminate(params, 0, f), model.discriminate(params, 0, f.copy()))
    for m in range(2):
        for k in list(params):
            if k.startswith(f"discriminator.{m}."):
                params[k] = np.zeros_like(params[k])
    logits = model.discriminate(params, 1, f)
    assert np.all(logits[:, 0] == logits[:, 1])
    assert np.all(np.isfinite(logits))


def test_alpha_zero_unit_gamma_is_mean_cross_entropy():
    model = tiny_model(num_modalities=1)
    params = model.init_params(0)
    xs, ys, xt, _, clips = tiny_batch(model, 0)
    res = model.loss(params, xs, ys, xt, np.ones(3), 0.0, clips)
    logits, _ = model.forward(params, xs, clips)
    expect = softmax_cross_entropy(logits, ys)[0].mean()
    assert res.objective == pytest.approx(expect, rel=1e-12)
    assert all(not np.any(g) for k, g in res.grads.items() if model.is_discriminator(k))


def test_zero_weight_sample_contributes_nothing():
    model = tiny_model()
    params = model.init_params(0)
    xs, ys, xt, _, clips = tiny_batch(model, 1, n_s=2)
    ys = np.array([0, 1])
    gamma = np.array([0.0, 1.0, 1.0])
    full = model.loss(params, xs, ys, xt, gamma, 1.0, clips)
    # sample 0 weighs nothing: perturbing it must not change any gradient
    xs2 = xs.copy()
    xs2[0] += 5.0
    moved = model.loss(params, xs2, ys, xt, gamma, 1.0, clips)
    for k in full.grads:
        np.testing.assert_array_equal(full.grads[k], moved.grads[k])


def test_gamma_scales_classifier_gradient_linearly():
    model = tiny_model()
    params = model.init_params(0)
    xs, _, xt, _, clips = tiny_batch(model, 2, n_s=1)
    ys = np.array([2])
    g1 = model.loss(params, xs, ys, xt, np.array([1.0, 1.0, 1.0]), 1.0, clips).grads
    g2 = model.loss(params, xs, ys, xt, np.array([1.0, 1.0, 2.0]), 1.0, clips).grads
    for k in g1:
        if k.startswith("classifier."):
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-13)


def test_gamma_validation():
    model = tiny_model()
    params = model.init_params(0)
    xs, ys, xt, _, clips = tiny_batch(model, 0)
    with pytest.raises(ValueError):
        model.loss(params, xs, ys, xt, np.ones(4), 1.0, clips)
    with pytest.raises(ValueError):
        model.loss(params, xs, ys, xt, np.array([1.0, -0.5, 1.0]), 1.0, clips)


@pytest.mark.parametrize("alpha", [0.0, 1.0, 0.7])
def test_single_modality_matches_pvda_objective(alpha):
    model = tiny_model(num_modalities=1, frames=3)
    params = model.init_params(5)
    xs, ys, xt, gamma, clips = tiny_batch(model, 5)
    res = model.loss(params, xs, ys, xt, gamma, alpha, clips)
    ly, lds, ldt = model.per_sample_losses(params, xs, ys, xt, clips)
    ref = pvda_objective(ly, lds[:, 0], ldt[:, 0], gamma[ys], alpha)
    assert abs(res.objective - ref) < 1e-9


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("share", [True, False])
def test_loss_gradient_finite_difference(seed, share):
    model = tiny_model(share_relation=share, frames=3 if seed % 2 else 2)
    rng = np.random.default_rng(seed)
    params = randomize_biases(model.init_params(seed), rng)
    xs, ys, xt, gamma, clips = tiny_batch(model, seed)
    report = grad_check(loss_check_fn(model, xs, ys, xt, gamma, 1.0, clips), params)
    assert report.passed, report.per_param


def test_avgpool_gradient_finite_difference():
    model = tiny_model(fusion="avgpool")
    params = randomize_biases(model.init_params(0), np.random.default_rng(0))
    xs, ys, xt, gamma, clips = tiny_batch(model, 0)
    assert grad_check(loss_check_fn(model, xs, ys, xt, gamma, 0.5, clips), params).passed


def test_grl_sign_on_extractor_gradients():
    # extractor gradient = classifier part minus alpha * domain part
    model = tiny_model()
    params = model.init_params(0)
    xs, ys, xt, gamma, clips = tiny_batch(model, 3)
    g_full = model.loss(params, xs, ys, xt, gamma, 1.0, clips).grads
    g_cls = model.loss(params, xs, ys, xt, gamma, 0.0, clips).grads
    g_dom2 = model.loss(params, xs, ys, xt, gamma, 2.0, clips).grads
    for k in g_full:
        if k.startswith("extractor."):
            dom = g_full[k] - g_cls[k]
            np.testing.assert_allclose(g_dom2[k] - g_cls[k], 2 * dom, rtol=1e-9, atol=1e-12)
