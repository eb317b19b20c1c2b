import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from grcf import autodiff as ad
from grcf.autodiff import Tensor
from grcf.data import ablate, collate, generate_synthetic
from grcf.errors import DataError, ShapeError
from grcf.model import GRCFModel, ModelConfig, apply_dropout, attention_pool

SMALL = dict(d_text=6, d_audio=4, d_vision=5, d_proj=6, d_fused=7, d_unified=5)


def feats(n=6, seed=0, task="regression", cfg=SMALL):
    return collate(generate_synthetic(n, seed=seed, dims=(cfg["d_text"], cfg["d_audio"], cfg["d_vision"]),
                                      task=task, max_len=5))


# ---------------------------------------------------------------- pooling


def test_pool_identical_frames():
    v = np.array([0.3, -1.0, 2.0])
    frames = np.tile(v, (4, 1))
    out = attention_pool(frames, 4, np.array([1.0, 2.0, -0.5]))
    np.testing.assert_allclose(out.data, v, atol=1e-15)


def test_pool_single_frame_ignores_scores():
    frames = np.random.default_rng(0).normal(size=(5, 3))
    out = attention_pool(frames, 1, np.array([10.0, -3.0, 4.0]))
    np.testing.assert_array_equal(out.data, frames[0])


def test_pool_uniform_scores_is_mean():
    frames = np.array([[1.0, 2.0], [3.0, -2.0], [100.0, 100.0]])
    out = attention_pool(frames, 2, np.zeros(2))
    np.testing.assert_allclose(out.data, [2.0, 0.0])


def test_pool_errors():
    with pytest.raises(DataError, match="empty modality sequence"):
        attention_pool(np.ones((3, 2)), 0, np.zeros(2))
    with pytest.raises(ShapeError):
        attention_pool(np.ones((3, 2)), 2, np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(L=st.integers(1, 6), extra=st.integers(0, 3), seed=st.integers(0, 1000))
def test_padding_never_affects_pooling(L, extra, seed):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(L + extra, 3))
    w = rng.normal(size=3)
    padded = frames.copy()
    padded[L:] = rng.normal(size=(extra, 3)) * 100
    np.testing.assert_allclose(attention_pool(frames, L, w).data, attention_pool(padded, L, w).data,
                               rtol=0, atol=1e-12)


# ---------------------------------------------------------------- config and head


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(alpha=2.0, S=3.0)
    with pytest.raises(ValidationError):
        ModelConfig(d_text=0)
    with pytest.raises(ValidationError):
        ModelConfig(widthh=3)


def test_head_asymptotics():
    m = GRCFModel(ModelConfig(**SMALL), seed=1)
    f = feats()
    m.params["head.W2"].data[:] = 0.0
    m.params["head.b2"].data[:] = 0.0
    np.testing.assert_array_equal(m.predict(f), 0.0)
    m.params["head.b2"].data[:] = math.atanh(6 / 7)
    np.testing.assert_allclose(m.predict(f), 3.0, atol=1e-14)
    # large but finite pre-activations stay strictly inside (-alpha, alpha)
    m.params["head.b2"].data[:] = 15.0
    assert np.all(np.abs(m.predict(f)) < 3.5)


def test_output_is_alpha_tanh_of_head():
    m = GRCFModel(ModelConfig(**SMALL), seed=2)
    y, parts = m(feats(), return_parts=True)
    np.testing.assert_allclose(y.data, 3.5 * np.tanh(parts["f_reg"].data), atol=0)


def test_dimension_mismatch_is_typed():
    m = GRCFModel(ModelConfig(**SMALL))
    f = feats(cfg={**SMALL, "d_vision": 7})
    with pytest.raises(ShapeError):
        m(f)


# ---------------------------------------------------------------- dropout


def test_dropout():
    x = Tensor(np.ones(100_000))
    rng = np.random.default_rng(0)
    assert apply_dropout(x, 0.0, True, rng) is x
    assert apply_dropout(x, 0.5, False, rng) is x
    out = apply_dropout(x, 0.5, True, rng).data
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_eval_mode_is_deterministic():
    m = GRCFModel(ModelConfig(**SMALL), seed=3)
    f = feats()
    np.testing.assert_array_equal(m.predict(f), m.predict(f))
    a = m(f, training=True, rng=np.random.default_rng(0)).data
    b = m(f, training=True, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------- classification fusion


def cls_model(seed=0):
    cfg = ModelConfig(**SMALL, head_kind="classification")
    return GRCFModel(cfg, seed=seed), feats(task="classification")


def test_gate_saturation():
    m, f = cls_model()
    m.params["gate.W2"].data[:] = 0.0
    m.params["gate.b2"].data[:] = 1000.0
    _, parts = m(f, return_parts=True)
    np.testing.assert_array_equal(parts["z_final"].data, parts["z_text"].data)
    m.params["gate.b2"].data[:] = -1000.0
    _, parts = m(f, return_parts=True)
    np.testing.assert_array_equal(parts["z_final"].data, parts["z_fused"].data)


def test_single_token_attention_is_its_value():
    m, f = cls_model(4)
    samples = ablate(generate_synthetic(5, seed=1, dims=(6, 4, 5), task="classification", max_len=5), ["vision"])
    f = collate(samples)
    _, parts = m(f, return_parts=True)
    p = {k: v.data for k, v in m.params.items()}
    z_a, _ = m._pooled("audio", f.audio, f.audio_len)
    value = z_a.data @ p["fusion.v.W"] + p["fusion.v.b"]
    np.testing.assert_allclose(parts["z_fused"].data, value @ p["fusion.o.W"] + p["fusion.o.b"], atol=1e-12)


def test_text_only_when_audio_and_vision_ablated():
    for task in ("regression", "classification"):
        cfg = ModelConfig(**SMALL, head_kind=task)
        m = GRCFModel(cfg, seed=5)
        base = ablate(generate_synthetic(4, seed=2, dims=(6, 4, 5), task=task, max_len=5), ["audio", "vision"])
        other = ablate(generate_synthetic(4, seed=9, dims=(6, 4, 5), task=task, max_len=5), ["audio", "vision"])
        for b, o in zip(base, other):
            o.text_emb[:] = b.text_emb
        np.testing.assert_array_equal(m.predict(collate(base)), m.predict(collate(other)))


# ---------------------------------------------------------------- parameters and checkpoints


def test_parameter_naming_and_groups():
    m = GRCFModel(ModelConfig(**SMALL))
    names = [n for n, _ in m.named_parameters()]
    assert names == list(GRCFModel(ModelConfig(**SMALL)).params)
    assert m.param_group("audio.proj.W") == "encoder_base"
    assert m.param_group("unified.W1") == "encoder_top"
    assert m.param_group("head.b2") == "head"
    assert m.param_group("fusion.W1") == "head"


def test_checkpoint_round_trip(tmp_path):
    m = GRCFModel(ModelConfig(**SMALL), seed=7)
    path = tmp_path / "m.json"
    m.save(path)
    m2 = GRCFModel.load(path)
    f = feats()
    np.testing.assert_array_equal(m.predict(f), m2.predict(f))
    assert m2.to_json() == m.to_json()


def test_full_model_gradient_check():
    cfg = ModelConfig(**SMALL, dropout_fusion=0.0, dropout_unified=0.0)
    m = GRCFModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    for p in m.parameters():
        p.data = p.data + rng.normal(0, 0.3, p.shape)
    f = feats(3)
    def loss():
        return ad.mean(ad.square(m(f) - 0.5))
    assert ad.finite_diff_check(loss, m.parameters(), max_coords=15, rng=rng) < 1e-5
