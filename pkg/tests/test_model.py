"""Forward passes, embedding heads, classifier, and the matching loss."""

import numpy as np
import pytest

from _reference import reference_embedding, reference_logits
from conftest import random_image, tiny_config

from embedmatch.autodiff import ShapeError, finite_diff_gradient
from embedmatch.model import (EMBED_KINDS, Embedding, ModelConfig, embed, logits,
                              matching_loss_and_grad, matching_loss_grad_embed, predict)
from embedmatch.weights_io import init_weights


@pytest.fixture()
def setup():
    cfg = tiny_config()
    return cfg, init_weights(cfg, seed=1), np.random.default_rng(7)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_size=30, patch_size=8)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=65, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(depth=0)


def test_embed_deterministic_bitwise(setup):
    cfg, w, rng = setup
    x = random_image(rng, cfg)
    a = embed(x, w, "class_token")
    b = embed(x.copy(), w, "class_token")
    assert a.values.tobytes() == b.values.tobytes()


def test_embeddings_distinguish_inputs(setup):
    cfg, w, _ = setup
    shape = (cfg.image_size, cfg.image_size, cfg.channels)
    e0 = embed(np.zeros(shape, np.float32), w, "class_token")
    e1 = embed(np.ones(shape, np.float32), w, "class_token")
    cos = float(e0.values @ e1.values /
                (np.linalg.norm(e0.values) * np.linalg.norm(e1.values)))
    assert cos < 1.0


def test_embedding_kinds_differ(setup):
    cfg, w, rng = setup
    x = random_image(rng, cfg)
    assert not np.array_equal(embed(x, w, "class_token").values,
                              embed(x, w, "mil_mean").values)


def test_embed_matches_float64_reference(setup):
    cfg, w, rng = setup
    x = random_image(rng, cfg)
    for kind in EMBED_KINDS:
        got = embed(x, w, kind).values.astype(np.float64)
        want = reference_embedding(x, w, kind)
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_embed_rejects_wrong_dims(setup):
    cfg, w, _ = setup
    with pytest.raises(ShapeError):
        embed(np.zeros((cfg.image_size + 1, cfg.image_size, cfg.channels), np.float32),
              w, "class_token")


def test_zero_head_gives_zero_logits(setup):
    cfg, w, rng = setup
    w.tensors["head.class_token.w"] = np.zeros_like(w.tensors["head.class_token.w"])
    w.tensors["head.class_token.b"] = np.zeros_like(w.tensors["head.class_token.b"])
    out = logits(random_image(rng, cfg), w, "class_token")
    np.testing.assert_array_equal(out, np.zeros(cfg.num_classes, np.float32))


def test_logits_deterministic_and_match_oracle(setup):
    cfg, w, rng = setup
    x = random_image(rng, cfg)
    a = logits(x, w, "mil_mean")
    b = logits(x, w, "mil_mean")
    assert a.tobytes() == b.tobytes()
    # brute-force linear algebra on the embedding
    e = embed(x, w, "mil_mean").values.astype(np.float64)
    oracle = np.array([e @ w.tensors["head.mil_mean.w"].astype(np.float64)[:, j]
                       + float(w.tensors["head.mil_mean.b"][j])
                       for j in range(cfg.num_classes)])
    assert int(np.argmax(a)) == int(np.argmax(oracle))
    np.testing.assert_allclose(a, oracle, atol=1e-5)


def test_predict_tie_breaks_to_lowest_index():
    # argmax semantics on raw logits vectors
    assert int(np.argmax(np.array([0.2, 0.9, 0.1]))) == 1
    assert int(np.argmax(np.array([0.5, 0.5]))) == 0


def test_predict_agrees_with_logits_oracle(setup):
    cfg, w, rng = setup
    for _ in range(100):
        x = random_image(rng, cfg)
        ref = reference_logits(x, w, "class_token")
        assert predict(x, w, "class_token") == int(np.argmax(ref))


def test_matching_loss_at_own_embedding_is_zero(setup):
    cfg, w, rng = setup
    x = random_image(rng, cfg)
    for kind in EMBED_KINDS:
        loss, grad = matching_loss_and_grad(x, embed(x, w, kind), w, kind)
        assert loss < 1e-10
        assert np.max(np.abs(grad)) < 1e-6


def test_matching_loss_is_half_squared_distance(setup):
    cfg, w, rng = setup
    x = random_image(rng, cfg)
    target = embed(random_image(rng, cfg), w, "mil_mean")
    loss, _, emb = matching_loss_grad_embed(x, target, w, "mil_mean")
    d = emb.astype(np.float64) - target.values.astype(np.float64)
    assert abs(loss - 0.5 * float(d @ d)) < 1e-9 * max(1.0, loss)


def test_matching_loss_nonnegative(setup):
    cfg, w, rng = setup
    for _ in range(10):
        x = random_image(rng, cfg)
        target = embed(random_image(rng, cfg), w, "class_token")
        loss, _ = matching_loss_and_grad(x, target, w, "class_token")
        assert loss >= 0.0


def test_matching_grad_matches_finite_differences_both_kinds(setup):
    from _reference import reference_matching_loss
    cfg, w, rng = setup
    x = random_image(rng, cfg)
    for kind in EMBED_KINDS:
        target = embed(random_image(rng, cfg), w, kind)
        _, grad = matching_loss_and_grad(x, target, w, kind)
        fd = finite_diff_gradient(
            lambda v: reference_matching_loss(v, target.values, w, kind), x, 1e-3)
        assert np.linalg.norm(grad.astype(np.float64) - fd) <= 1e-3 * max(np.linalg.norm(fd), 1.0)


def test_matching_rejects_kind_mismatch(setup):
    cfg, w, rng = setup
    x = random_image(rng, cfg)
    target = embed(x, w, "class_token")
    with pytest.raises(ValueError):
        matching_loss_and_grad(x, target, w, "mil_mean")


def test_embedding_kind_validation():
    with pytest.raises(ValueError):
        Embedding(np.zeros(4, np.float32), "nope")
