"""Encoder stack: initialization, forward passes, class registration,
momentum tracking, and the checkpoint byte format."""

from __future__ import annotations

import numpy as np
import pytest

from mixcil.encoder import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    EncoderSpec,
    forward_classifier,
    forward_features,
    forward_projection,
    init_params,
    load_checkpoint,
    momentum_sync,
    params_digest,
    register_classes,
    save_checkpoint,
)
from mixcil.tensor import ShapeError


SPEC = EncoderSpec(input_dim=8, hidden_dims=(16,), feature_dim=12, projection_dim=6)


def test_init_is_seed_deterministic():
    a = init_params(SPEC, seed=3)
    b = init_params(SPEC, seed=3)
    c = init_params(SPEC, seed=4)
    assert params_digest(a) == params_digest(b)
    assert params_digest(a) != params_digest(c)


def test_momentum_copy_starts_bit_equal_to_online():
    p = init_params(SPEC, seed=0)
    for online, tracked in zip(p.online_tracked(), p.momentum_tracked()):
        assert online.values.tobytes() == tracked.values.tobytes()
        assert online is not tracked


def test_layer_shapes_follow_spec():
    p = init_params(SPEC, seed=1)
    shapes = [w.shape for w, _ in p.layers]
    assert shapes == [(8, 16), (16, 12)]
    assert [b.shape for _, b in p.layers] == [(16,), (12,)]
    assert p.projection.shape == (12, 6)
    assert p.classifier.shape == (0, 12)


def test_forward_features_shape_and_width_check():
    p = init_params(SPEC, seed=1)
    out = forward_features(p, np.ones((5, 8)))
    assert out.shape == (5, 12)
    with pytest.raises(ShapeError):
        forward_features(p, np.ones((5, 7)))


def test_forward_projection_rows_are_unit_length():
    p = init_params(SPEC, seed=2)
    feats = forward_features(p, np.random.default_rng(0).normal(size=(7, 8)))
    proj = forward_projection(p, feats)
    assert proj.shape == (7, 6)
    assert np.allclose(np.linalg.norm(proj.values, axis=1), 1.0, atol=1e-12)


def test_classifier_width_is_factor_times_registered():
    p = init_params(SPEC, seed=0, proxy_factor=2)
    register_classes(p, 10)
    assert p.registered_classes == 10
    assert p.classifier_width == 20
    register_classes(p, 50)
    assert p.registered_classes == 60
    assert p.classifier_width == 120


def test_registration_preserves_old_rows_and_zero_fills_new_ones():
    p = init_params(SPEC, seed=0, proxy_factor=2)
    register_classes(p, 3)
    p.classifier.values[:] = np.random.default_rng(1).normal(size=(6, 12))
    old = p.classifier.values.copy()
    before = p.classifier
    register_classes(p, 2)
    assert p.classifier is not before  # replaced, not resized in place
    assert np.array_equal(p.classifier.values[:6], old)
    assert np.array_equal(p.classifier.values[6:], np.zeros((4, 12)))


def test_fresh_rows_score_zero_for_every_input():
    p = init_params(SPEC, seed=0, proxy_factor=1)
    register_classes(p, 4)
    feats = forward_features(p, np.random.default_rng(2).normal(size=(3, 8)))
    logits = forward_classifier(p, feats)
    assert np.array_equal(logits.values, np.zeros((3, 4)))


def test_classifier_requires_registration():
    p = init_params(SPEC, seed=0)
    feats = forward_features(p, np.ones((1, 8)))
    with pytest.raises(ShapeError):
        forward_classifier(p, feats)


def test_momentum_sync_interpolates_and_skips_classifier():
    p = init_params(SPEC, seed=0, ema=0.5)
    register_classes(p, 2)
    w0 = p.layers[0][0]
    tracked_before = p.ema_layers[0][0].values.copy()
    w0.values += 1.0
    momentum_sync(p)
    assert np.allclose(p.ema_layers[0][0].values, 0.5 * tracked_before + 0.5 * w0.values)
    # the classifier has no momentum twin at all
    assert all(t.shape != p.classifier.shape or t is not p.classifier for t in p.momentum_tracked())


def test_momentum_forward_uses_the_key_copy():
    p = init_params(SPEC, seed=0, ema=1.0)  # key copy frozen in place
    x = np.random.default_rng(3).normal(size=(4, 8))
    frozen = forward_features(p, x, use_momentum=True).values.copy()
    p.layers[0][0].values += 0.5
    momentum_sync(p)
    assert not np.allclose(forward_features(p, x).values, frozen)
    assert np.array_equal(forward_features(p, x, use_momentum=True).values, frozen)


def test_digest_flags_single_entry_change():
    p = init_params(SPEC, seed=0)
    before = params_digest(p)
    p.layers[0][0].values[0, 0] += 1e-12
    assert params_digest(p) != before


def test_digest_can_exclude_classifier():
    p = init_params(SPEC, seed=0)
    register_classes(p, 3)
    bare = params_digest(p, include_classifier=False)
    register_classes(p, 2)
    assert params_digest(p, include_classifier=False) == bare
    assert params_digest(p, include_classifier=True) != bare


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = init_params(EncoderSpec(6, (10, 9), 8, 4), seed=11, proxy_factor=2, ema=0.997)
    register_classes(p, 5)
    p.classifier.values[:] = np.random.default_rng(4).normal(size=p.classifier.shape)
    momentum_sync(p)
    path = tmp_path / "model.bin"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.spec == p.spec
    assert q.proxy_factor == p.proxy_factor
    assert q.registered_classes == 5
    assert q.ema == p.ema
    assert params_digest(q) == params_digest(p)
    for a, b in zip(q.momentum_tracked(), p.momentum_tracked()):
        assert a.values.tobytes() == b.values.tobytes()


def test_checkpoint_truncation_names_the_missing_field(tmp_path):
    p = init_params(SPEC, seed=0)
    register_classes(p, 2)
    path = tmp_path / "model.bin"
    save_checkpoint(p, path)
    blob = path.read_bytes()
    short = tmp_path / "short.bin"
    short.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(short)
    tiny = tmp_path / "tiny.bin"
    tiny.write_bytes(blob[:7])
    with pytest.raises(CheckpointError, match="input_dim"):
        load_checkpoint(tiny)


def test_checkpoint_rejects_wrong_magic_and_trailing_bytes(tmp_path):
    p = init_params(SPEC, seed=0)
    register_classes(p, 1)
    path = tmp_path / "model.bin"
    save_checkpoint(p, path)
    blob = path.read_bytes()
    assert blob[:5] == CHECKPOINT_MAGIC

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)

    fat = tmp_path / "fat.bin"
    fat.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(fat)


def test_init_validates_arguments():
    with pytest.raises(ValueError):
        init_params(SPEC, seed=0, proxy_factor=0)
    with pytest.raises(ValueError):
        init_params(SPEC, seed=0, ema=1.5)
    with pytest.raises(ValueError):
        EncoderSpec(input_dim=0)
