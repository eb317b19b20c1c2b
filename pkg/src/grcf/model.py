"""The multimodal network over pre-extracted features.

Audio and vision frame sequences are layer-normed, attention-pooled and
projected; text arrives as a precomputed sentence vector. Regression
concatenates the three and runs fusion MLP -> unified encoder -> tanh-scaled
head. Classification fuses with text-queried cross-attention over the two
pooled tokens and a scalar gate.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError

LN_EPS = 1e-5


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    d_text: int = Field(32, ge=1)
    d_audio: int = Field(16, ge=1)
    d_vision: int = Field(16, ge=1)
    d_proj: int = Field(32, ge=1)
    d_fused: int = Field(64, ge=1)
    d_unified: int = Field(64, ge=1)
    alpha: float = Field(3.5, gt=0)
    S: float = Field(3.0, gt=0)
    head_kind: Literal["regression", "classification"] = "regression"
    dropout_fusion: float = Field(0.4, ge=0, lt=1)
    dropout_unified: float = Field(0.2, ge=0, lt=1)

    @model_validator(mode="after")
    def _alpha_covers_range(self):
        if self.alpha < self.S:
            raise ValueError(f"alpha ({self.alpha}) must be >= S ({self.S})")
        return self


@dataclass
class Features:
    """A batch of model inputs. A modality length of 0 marks it as ablated."""

    text: np.ndarray          # [B, d_text]
    audio: np.ndarray         # [B, L_a, d_audio]
    audio_len: np.ndarray     # [B]
    vision: np.ndarray        # [B, L_v, d_vision]
    vision_len: np.ndarray    # [B]

    def __len__(self) -> int:
        return self.text.shape[0]

    def take(self, idx) -> "Features":
        return Features(self.text[idx], self.audio[idx], self.audio_len[idx],
                        self.vision[idx], self.vision_len[idx])


def concat_features(parts: list[Features]) -> Features:
    la = max(p.audio.shape[1] for p in parts)
    lv = max(p.vision.shape[1] for p in parts)

    def pad(x, L):
        return np.pad(x, ((0, 0), (0, L - x.shape[1]), (0, 0)))

    return Features(np.concatenate([p.text for p in parts]),
                    np.concatenate([pad(p.audio, la) for p in parts]),
                    np.concatenate([p.audio_len for p in parts]),
                    np.concatenate([pad(p.vision, lv) for p in parts]),
                    np.concatenate([p.vision_len for p in parts]))


# ---------------------------------------------------------------- building blocks


def attention_pool(frames, valid_len, w):
    """Softmax(w . frame) weighted sum over the first ``valid_len`` frames.

    Accepts a single [L, d] sequence with an int length, or a batch [B, L, d]
    with a length vector.
    """
    frames = ad.as_tensor(frames)
    single = frames.ndim == 2
    if single:
        frames = frames.reshape(1, *frames.shape)
    lens = np.atleast_1d(np.asarray(valid_len, dtype=np.int64))
    B, L, d = frames.shape
    if lens.shape != (B,):
        raise ShapeError("attention_pool", frames.shape, lens.shape)
    if (lens < 1).any():
        raise DataError("empty modality sequence")
    if (lens > L).any():
        raise DataError(f"valid_len exceeds stored length {L}")
    w = ad.as_tensor(w)
    if w.shape != (d,):
        raise ShapeError("attention_pool", frames.shape, w.shape)
    scores = (frames @ w.reshape(d, 1)).reshape(B, L)
    mask = np.arange(L)[None, :] < lens[:, None]
    alpha = ad.masked_softmax(scores, mask, axis=1)
    pooled = ad.sum_(alpha.reshape(B, L, 1) * frames, axis=1)
    return pooled.reshape(d) if single else pooled


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(ad.square(xc), axis=-1, keepdims=True)
    return xc / ad.sqrt(var + LN_EPS) * gain + bias


def apply_dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x * keep


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ---------------------------------------------------------------- model


class GRCFModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 42):
        self.config = config
        shapes = self._param_shapes()
        if params is None:
            params = self._init_params(shapes, np.random.default_rng(seed))
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        if missing or extra:
            raise ShapeError("checkpoint params", sorted(missing), sorted(extra))
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"param {name}", arr.shape, shape)
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        s: dict[str, tuple[int, ...]] = {}
        for mod, d in (("audio", c.d_audio), ("vision", c.d_vision)):
            s[f"{mod}.norm.gain"] = (d,)
            s[f"{mod}.norm.bias"] = (d,)
            s[f"{mod}.pool.w"] = (d,)
            s[f"{mod}.proj.W"] = (d, c.d_proj)
            s[f"{mod}.proj.b"] = (c.d_proj,)

        def mlp(prefix, d_in, d_hid, d_out):
            s[f"{prefix}.W1"] = (d_in, d_hid)
            s[f"{prefix}.b1"] = (d_hid,)
            s[f"{prefix}.W2"] = (d_hid, d_out)
            s[f"{prefix}.b2"] = (d_out,)

        if c.head_kind == "regression":
            mlp("fusion", c.d_text + 2 * c.d_proj, c.d_fused, c.d_fused)
            mlp("unified", c.d_fused, c.d_unified, c.d_unified)
            mlp("head", c.d_unified, c.d_unified, 1)
        else:
            for name, shape in (("q", (c.d_text, c.d_proj)), ("k", (c.d_proj, c.d_proj)),
                                ("v", (c.d_proj, c.d_proj)), ("o", (c.d_proj, c.d_text))):
                s[f"fusion.{name}.W"] = shape
                s[f"fusion.{name}.b"] = (shape[1],)
            mlp("gate", 2 * c.d_text, c.d_fused, 1)
            mlp("classifier", c.d_text, c.d_unified, 1)
        return s

    @staticmethod
    def _init_params(shapes, rng) -> dict[str, np.ndarray]:
        out = {}
        for name, shape in shapes.items():
            if name.endswith("norm.gain"):
                out[name] = np.ones(shape)
            elif len(shape) == 2:
                out[name] = _glorot(rng, *shape)
            else:
                # biases, norm offsets and pooling score vectors start at zero
                out[name] = np.zeros(shape)
        return out

    # parameters -------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_group(self, name: str) -> str:
        """Learning-rate group: 'head', 'encoder_top' or 'encoder_base'."""
        top = name.split(".", 1)[0]
        if top in ("audio", "vision"):
            return "encoder_base"
        if top == "unified":
            return "encoder_top"
        return "head"

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    # forward ----------------------------------------------------------------

    def _check_features(self, f: Features) -> None:
        c = self.config
        checks = (("text", f.text.shape[-1], c.d_text), ("audio", f.audio.shape[-1], c.d_audio),
                  ("vision", f.vision.shape[-1], c.d_vision))
        for mod, got, want in checks:
            if got != want:
                raise ShapeError(f"forward {mod} features", (got,), (want,))

    def _pooled(self, mod: str, frames: np.ndarray, lens: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Projected pooled token per row and a presence mask (False = ablated)."""
        p = self.params
        lens = np.asarray(lens, dtype=np.int64)
        present = lens > 0
        normed = layer_norm(Tensor(frames), p[f"{mod}.norm.gain"], p[f"{mod}.norm.bias"])
        pooled = attention_pool(normed, np.where(present, lens, 1), p[f"{mod}.pool.w"])
        if not present.all():
            # ablated rows contribute a zero vector regardless of stored frames
            pooled = pooled * present[:, None].astype(np.float64)
        return pooled @ p[f"{mod}.proj.W"] + p[f"{mod}.proj.b"], present

    def _mlp(self, prefix: str, x: Tensor, p_drop: float = 0.0, training: bool = False, rng=None) -> Tensor:
        p = self.params
        h = ad.relu(x @ p[f"{prefix}.W1"] + p[f"{prefix}.b1"])
        h = apply_dropout(h, p_drop, training, rng)
        return h @ p[f"{prefix}.W2"] + p[f"{prefix}.b2"]

    def forward(self, f: Features, training: bool = False, rng=None, return_parts: bool = False):
        self._check_features(f)
        if self.config.head_kind == "regression":
            return self._forward_regression(f, training, rng, return_parts)
        return self._forward_classification(f, return_parts)

    __call__ = forward

    def _forward_regression(self, f, training, rng, return_parts):
        c = self.config
        z_t = Tensor(f.text)
        z_a, _ = self._pooled("audio", f.audio, f.audio_len)
        z_v, _ = self._pooled("vision", f.vision, f.vision_len)
        h = ad.concat([z_t, z_a, z_v], axis=1)
        z_mid = self._mlp("fusion", h, c.dropout_fusion, training, rng)
        z_final = self._mlp("unified", z_mid, c.dropout_unified, training, rng)
        f_reg = self._mlp("head", z_final).reshape(len(f))
        y_hat = c.alpha * ad.tanh(f_reg)
        if return_parts:
            return y_hat, {"f_reg": f_reg, "z_final": z_final}
        return y_hat

    def _forward_classification(self, f, return_parts):
        c = self.config
        p = self.params
        B = len(f)
        z_text = Tensor(f.text)
        z_a, has_a = self._pooled("audio", f.audio, f.audio_len)
        z_v, has_v = self._pooled("vision", f.vision, f.vision_len)
        tokens = ad.concat([z_a.reshape(B, 1, c.d_proj), z_v.reshape(B, 1, c.d_proj)], axis=1)
        mask = np.stack([has_a, has_v], axis=1)
        any_tok = mask.any(axis=1)
        q = z_text @ p["fusion.q.W"] + p["fusion.q.b"]
        k = tokens @ p["fusion.k.W"] + p["fusion.k.b"]
        v = tokens @ p["fusion.v.W"] + p["fusion.v.b"]
        scores = ad.sum_(k * q.reshape(B, 1, c.d_proj), axis=2) * (1.0 / np.sqrt(c.d_proj))
        attn = ad.masked_softmax(scores, np.where(any_tok[:, None], mask, True), axis=1)
        ctx = ad.sum_(attn.reshape(B, 2, 1) * v, axis=1)
        z_fused = ctx @ p["fusion.o.W"] + p["fusion.o.b"]
        if not any_tok.all():
            z_fused = z_fused * any_tok[:, None].astype(np.float64)
        g = ad.sigmoid(self._mlp("gate", ad.concat([z_text, z_fused], axis=1)))
        z_final = g * z_text + (1.0 - g) * z_fused
        logit = self._mlp("classifier", z_final).reshape(B)
        if return_parts:
            return logit, {"gate": g.reshape(B), "z_text": z_text, "z_fused": z_fused, "z_final": z_final}
        return logit

    def predict(self, f: Features, batch_size: int = 512) -> np.ndarray:
        out = []
        with ad.no_grad():
            for start in range(0, len(f), batch_size):
                idx = slice(start, start + batch_size)
                out.append(self.forward(f.take(idx)).data)
        return np.concatenate(out) if out else np.zeros(0)

    # checkpoint -------------------------------------------------------------

    def to_json(self) -> str:
        doc = {"config": self.config.model_dump(),
               "params": {k: v.data.tolist() for k, v in self.params.items()}}
        return json.dumps(doc, sort_keys=True)

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "GRCFModel":
        doc = json.loads(text)
        return cls(ModelConfig(**doc["config"]), {k: np.array(v) for k, v in doc["params"].items()})

    @classmethod
    def load(cls, path) -> "GRCFModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
