"""Dataset I/O, synthetic generation, pair sampling and eval-time perturbations."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .model import Features, atomic_write_text

MODALITIES = ("text", "audio", "vision")


@dataclass
class Sample:
    id: str
    label: float
    text_emb: np.ndarray
    audio: np.ndarray
    audio_len: int
    vision: np.ndarray
    vision_len: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "label": float(self.label),
            "text_emb": self.text_emb.tolist(),
            "audio": {"frames": self.audio.tolist(), "valid_len": int(self.audio_len)},
            "vision": {"frames": self.vision.tolist(), "valid_len": int(self.vision_len)},
        }

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.text_emb.shape[0], self.audio.shape[1], self.vision.shape[1]


@dataclass
class Pairs:
    i: np.ndarray
    j: np.ndarray
    c: np.ndarray

    def __len__(self) -> int:
        return len(self.i)


# ---------------------------------------------------------------- I/O


def _parse_modality(obj, key: str, sid: str, lineno: int) -> tuple[np.ndarray, int]:
    if not isinstance(obj, dict) or "frames" not in obj or "valid_len" not in obj:
        raise DataError(f"line {lineno}: {key} must be an object with 'frames' and 'valid_len'")
    frames = np.asarray(obj["frames"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DataError(f"line {lineno}: sample {sid!r} {key} frames must be a non-empty 2-D array")
    vlen = int(obj["valid_len"])
    if not 0 <= vlen <= frames.shape[0]:
        raise DataError(f"line {lineno}: sample {sid!r} {key} valid_len {vlen} out of range")
    return frames, vlen


def _validate_label(label: float, task: str, S: float, where: str) -> None:
    if task == "classification":
        if label not in (0.0, 1.0):
            raise DataError(f"{where}: classification label must be 0 or 1, got {label}")
    elif not -S <= label <= S:
        raise DataError(f"{where}: label {label} outside [-{S}, {S}]")


def load_dataset(path, task: str = "regression", S: float = 3.0) -> list[Sample]:
    samples: list[Sample] = []
    dims = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid = str(obj["id"])
                label = float(obj["label"])
                text = np.asarray(obj["text_emb"], dtype=np.float64)
                audio, alen = _parse_modality(obj["audio"], "audio", sid, lineno)
                vision, vlen = _parse_modality(obj["vision"], "vision", sid, lineno)
            except DataError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: malformed sample ({exc})") from None
            if text.ndim != 1:
                raise DataError(f"line {lineno}: sample {sid!r} text_emb must be a vector")
            for arr in (text, audio, vision):
                if not np.all(np.isfinite(arr)):
                    raise DataError(f"line {lineno}: sample {sid!r} has non-finite features")
            _validate_label(label, task, S, f"line {lineno}, sample {sid!r}")
            s = Sample(sid, label, text, audio, alen, vision, vlen)
            if dims is None:
                dims = s.dims
            elif s.dims != dims:
                raise DataError(f"sample {sid!r} (line {lineno}) has dims {s.dims}, expected {dims}")
            samples.append(s)
    if not samples:
        raise DataError(f"{path}: no samples")
    return samples


def dumps_dataset(samples: Iterable[Sample]) -> str:
    return "".join(json.dumps(s.to_json(), sort_keys=True) + "\n" for s in samples)


def save_dataset(samples: Iterable[Sample], path) -> None:
    atomic_write_text(path, dumps_dataset(samples))


def content_hash(path) -> str:
    """Git blob id of a file's bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def collate(samples: Sequence[Sample]) -> Features:
    la = max(s.audio.shape[0] for s in samples)
    lv = max(s.vision.shape[0] for s in samples)
    audio = np.zeros((len(samples), la, samples[0].audio.shape[1]))
    vision = np.zeros((len(samples), lv, samples[0].vision.shape[1]))
    for k, s in enumerate(samples):
        audio[k, : s.audio.shape[0]] = s.audio
        vision[k, : s.vision.shape[0]] = s.vision
    return Features(
        text=np.stack([s.text_emb for s in samples]),
        audio=audio,
        audio_len=np.array([s.audio_len for s in samples], dtype=np.int64),
        vision=vision,
        vision_len=np.array([s.vision_len for s in samples], dtype=np.int64),
    )


def labels_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.float64)


# ---------------------------------------------------------------- pairs


def default_num_pairs(n: int) -> int:
    return min(50000, 40 * n)


def sample_pairs(labels, M: int, rng: np.random.Generator) -> Pairs:
    """M ordered pairs (i != j) drawn uniformly with replacement; c = 1 iff y_i > y_j."""
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.size
    if n < 2:
        raise DataError("pair sampling needs at least 2 samples")
    if M < 1:
        raise DataError("number of pairs must be >= 1")
    i = rng.integers(0, n, size=M)
    j = rng.integers(0, n - 1, size=M)
    j = j + (j >= i)
    return Pairs(i, j, (labels[i] > labels[j]).astype(np.int64))


# ---------------------------------------------------------------- synthetic


def generate_synthetic(
    n: int,
    seed: int = 0,
    dims: tuple[int, int, int] = (32, 16, 16),
    task: str = "regression",
    noise: float | tuple[float, float, float] = 0.1,
    S: float = 3.0,
    max_len: int = 8,
    map_seed: int = 0,
) -> list[Sample]:
    """Features are a fixed random affine map of a latent score plus Gaussian noise.

    The map depends only on ``map_seed``, so sets drawn with different
    ``seed`` values share the same underlying relationship.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if task not in ("regression", "classification"):
        raise DataError(f"unknown task {task!r}")
    noise_t, noise_a, noise_v = (noise,) * 3 if np.isscalar(noise) else tuple(noise)
    d_t, d_a, d_v = dims
    mrng = np.random.default_rng(map_seed)
    maps = {m: (mrng.normal(size=d) / S, mrng.normal(size=d))
            for m, d in (("text", d_t), ("audio", d_a), ("vision", d_v))}

    rng = np.random.default_rng(seed)
    if task == "regression":
        latent = rng.uniform(-S, S, size=n)
        labels = latent.copy()
    else:
        bits = (np.arange(n) % 2).astype(np.float64)
        labels = rng.permutation(bits)
        latent = (2 * labels - 1) * rng.uniform(0.3, 1.0, size=n) * S

    samples = []
    for k in range(n):
        s = latent[k]
        u, c = maps["text"]
        text = s * u + c + noise_t * rng.normal(size=d_t)
        seqs = []
        for mod, d, sigma in (("audio", d_a, noise_a), ("vision", d_v, noise_v)):
            u, c = maps[mod]
            vlen = int(rng.integers(1, max_len + 1))
            frames = np.zeros((max_len, d))
            frames[:vlen] = s * u + c + sigma * rng.normal(size=(vlen, d))
            seqs.append((frames, vlen))
        (audio, alen), (vision, vlen) = seqs
        samples.append(Sample(f"syn-{seed}-{k:06d}", float(labels[k]), text, audio, alen, vision, vlen))
    return samples


# ---------------------------------------------------------------- perturbations


def add_noise(samples: Sequence[Sample], sigma: float, seed: int = 0) -> list[Sample]:
    """Gaussian noise on audio and vision frames; text is untouched."""
    if sigma < 0:
        raise DataError("noise sigma must be non-negative")
    if sigma == 0:
        return [replace(s) for s in samples]
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        audio = s.audio + rng.normal(0.0, sigma, size=s.audio.shape)
        vision = s.vision + rng.normal(0.0, sigma, size=s.vision.shape)
        out.append(replace(s, audio=audio, vision=vision))
    return out


def ablate(samples: Sequence[Sample], modalities: Iterable[str]) -> list[Sample]:
    """Zero the listed modalities; audio/vision also get length 0 (the model's ablation sentinel)."""
    mods = set(modalities)
    unknown = mods - set(MODALITIES)
    if unknown:
        raise DataError(f"unknown modalities {sorted(unknown)}")
    out = []
    for s in samples:
        kw = {}
        if "text" in mods:
            kw["text_emb"] = np.zeros_like(s.text_emb)
        if "audio" in mods:
            kw.update(audio=np.zeros_like(s.audio), audio_len=0)
        if "vision" in mods:
            kw.update(vision=np.zeros_like(s.vision), vision_len=0)
        out.append(replace(s, **kw))
    return out


def truncate(samples: Sequence[Sample], target: dict[str, int]) -> list[Sample]:
    """Keep the leading ``target[modality]`` feature dims."""
    unknown = set(target) - set(MODALITIES)
    if unknown:
        raise DataError(f"unknown modalities {sorted(unknown)}")
    if not samples:
        return []
    src = dict(zip(MODALITIES, samples[0].dims))
    for mod, d in target.items():
        if d > src[mod]:
            raise DataError(f"cannot truncate {mod} from {src[mod]} to {d} dims")
        if d < 1:
            raise DataError(f"truncation target for {mod} must be >= 1")
    out = []
    for s in samples:
        kw = {}
        if "text" in target:
            kw["text_emb"] = s.text_emb[: target["text"]].copy()
        if "audio" in target:
            kw["audio"] = s.audio[:, : target["audio"]].copy()
        if "vision" in target:
            kw["vision"] = s.vision[:, : target["vision"]].copy()
        out.append(replace(s, **kw))
    return out


def perturb(samples: Sequence[Sample], mode: str, params, seed: int = 0) -> list[Sample]:
    if mode == "noise":
        return add_noise(samples, float(params), seed)
    if mode == "ablate":
        return ablate(samples, params)
    if mode == "truncate":
        return truncate(samples, params)
    raise DataError(f"unknown perturbation {mode!r}")
