"""Raw-waveform audio classifier used as a stand-in audio feature extractor.

The network is four strided 1-D convolutions with ReLU, global average
pooling, and an affine head. The pooled vector (before the head) is the
embedding fed to the dialog model. It is trained on a synthetic five-class
suite (pure tone, linear chirp, white noise, amplitude-modulated tone, tone
burst) so everything runs offline and deterministically.

Waveform input files are either 16-bit mono PCM WAV, or raw float text (any
whitespace-separated samples, optionally preceded by a ``# sample_rate N``
line). Feature files are text: a header ``modality T D`` then T rows of D
floats.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx

DEFAULT_SAMPLE_RATE = 44100
CLASS_NAMES = ("tone", "chirp", "noise", "am_tone", "burst")
MODALITIES = ("audio", "visual")
SOURCE_TAGS = ("aclnet_standin", "external_vggish", "external_visual")
# (kernel width, stride, output channels) per conv layer
DEFAULT_LAYERS = ((32, 8, 8), (8, 4, 16), (8, 4, 32), (4, 2, 32))


class FeatureFormatError(ValueError):
    """A feature or waveform file does not match its declared layout."""


def normalize(samples) -> np.ndarray:
    """Scale to max |x| = 1; all-zero input is returned unchanged."""
    x = np.asarray(samples, dtype=np.float64)
    peak = np.max(np.abs(x)) if x.size else 0.0
    return x / peak if peak > 0 else x.copy()


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")
        object.__setattr__(self, "samples", normalize(x))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class AudioDataset:
    train: list[tuple[Waveform, int]]
    test: list[tuple[Waveform, int]]
    class_names: tuple[str, ...]


def _synth_one(kind, n, sr, rng):
    t = np.arange(n) / sr
    phase = rng.uniform(0, 2 * np.pi)
    if kind == "tone":
        x = np.sin(2 * np.pi * rng.uniform(300, 3000) * t + phase)
    elif kind == "chirp":
        f0, f1 = rng.uniform(200, 800), rng.uniform(2500, 5000)
        if rng.random() < 0.5:
            f0, f1 = f1, f0
        dur = n / sr
        x = np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * dur)) + phase)
    elif kind == "noise":
        x = rng.normal(size=n)
    elif kind == "am_tone":
        fm = rng.uniform(8, 20)
        depth = rng.uniform(0.7, 1.0)
        env = 1 + depth * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi))
        x = env * np.sin(2 * np.pi * rng.uniform(300, 3000) * t + phase)
    elif kind == "burst":
        length = int(n * rng.uniform(0.15, 0.35))
        start = rng.integers(0, n - length + 1)
        x = np.zeros(n)
        x[start:start + length] = np.sin(2 * np.pi * rng.uniform(300, 3000) * t[:length] + phase)
    else:
        raise ValueError(f"unknown sound class {kind!r}")
    x = x * rng.uniform(0.2, 2.0) + rng.normal(scale=0.01, size=n)
    return x


def synth_dataset(classes: int = 5, per_class: int = 40, duration_s: float = 0.25,
                  rng_seed: int = 0, sample_rate: int = DEFAULT_SAMPLE_RATE,
                  train_fraction: float = 0.8) -> AudioDataset:
    """Deterministic labelled waveforms, split per class into train/test."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if classes > len(CLASS_NAMES):
        raise ValueError(f"only {len(CLASS_NAMES)} synthetic classes are defined")
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng(rng_seed)
    n_train = int(round(train_fraction * per_class))
    train, test = [], []
    for label, kind in enumerate(CLASS_NAMES[:classes]):
        items = [(Waveform(_synth_one(kind, n, sample_rate, rng), sample_rate), label)
                 for _ in range(per_class)]
        train += items[:n_train]
        test += items[n_train:]
    return AudioDataset(train, test, CLASS_NAMES[:classes])


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class AudioClassifierParams:
    store: nx.ParamStore
    layers: tuple[tuple[int, int, int], ...]
    num_classes: int
    class_names: tuple[str, ...] = ()

    @property
    def embed_dim(self) -> int:
        return self.layers[-1][2]

    @property
    def receptive_field(self) -> int:
        """Shortest input that survives every valid convolution."""
        size = 1
        for k, s, _ in reversed(self.layers):
            size = (size - 1) * s + k
        return size

    @classmethod
    def init(cls, num_classes, layers=DEFAULT_LAYERS, rng_seed=0, class_names=()):
        rng = np.random.default_rng(rng_seed)
        store = nx.ParamStore()
        c_in = 1
        for i, (k, _, c_out) in enumerate(layers):
            scale = math.sqrt(6.0 / (c_in * k))  # He-uniform for ReLU
            store.add(f"conv{i}.W", rng.uniform(-scale, scale, (c_out, c_in, k)))
            store.add(f"conv{i}.b", np.zeros(c_out))
            c_in = c_out
        scale = math.sqrt(6.0 / (c_in + num_classes))
        store.add("head.W", rng.uniform(-scale, scale, (num_classes, c_in)))
        store.add("head.b", np.zeros(num_classes))
        return cls(store, tuple(tuple(l) for l in layers), num_classes, tuple(class_names))


def features_forward(params: AudioClassifierParams, x: np.ndarray):
    """Pooled embeddings for a batch ``x`` of shape (N, L); returns ``(emb, cache)``."""
    h = x[:, None, :]
    caches = []
    for i, (_, stride, _) in enumerate(params.layers):
        if h.shape[2] < params.layers[i][0]:
            raise ValueError(f"input of {x.shape[1]} samples is shorter than the "
                             f"receptive field ({params.receptive_field})")
        a, conv_cache = nx.conv1d_forward(h, params.store[f"conv{i}.W"],
                                          params.store[f"conv{i}.b"], stride)
        h, relu_cache = nx.relu_forward(a)
        caches.append((conv_cache, relu_cache))
    emb, pool_cache = nx.global_avg_pool_forward(h)
    return emb, (caches, pool_cache)


def features_backward(params, demb, cache):
    caches, pool_cache = cache
    dh = nx.global_avg_pool_backward(demb, pool_cache)
    for i in range(len(params.layers) - 1, -1, -1):
        conv_cache, relu_cache = caches[i]
        da = nx.relu_backward(dh, relu_cache)
        dh, dW, db = nx.conv1d_backward(da, conv_cache)
        params.store.grads[f"conv{i}.W"] += dW
        params.store.grads[f"conv{i}.b"] += db
    return dh[:, 0, :]


def batch_loss(params: AudioClassifierParams, x: np.ndarray, labels: np.ndarray,
               backward: bool = True) -> float:
    """Mean softmax cross-entropy over the batch; accumulates gradients."""
    emb, cache = features_forward(params, x)
    logits, head_cache = nx.affine_forward(emb, params.store["head.W"], params.store["head.b"])
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    n = x.shape[0]
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    if backward:
        dlogits = np.exp(shifted - logz[:, None])
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        demb, dW, db = nx.affine_backward(dlogits, head_cache)
        params.store.grads["head.W"] += dW
        params.store.grads["head.b"] += db
        features_backward(params, demb, cache)
    return loss


def predict(params: AudioClassifierParams, waveforms: Sequence[Waveform]) -> np.ndarray:
    x = np.stack([w.samples for w in waveforms])
    emb, _ = features_forward(params, x)
    logits, _ = nx.affine_forward(emb, params.store["head.W"], params.store["head.b"])
    return logits.argmax(axis=1)


def accuracy(params, items: Sequence[tuple[Waveform, int]]) -> float:
    preds = predict(params, [w for w, _ in items])
    return float(np.mean(preds == np.array([y for _, y in items])))


def train_audio_clf(dataset: AudioDataset, epochs: int = 30, rng_seed: int = 0,
                    batch_size: int = 16, learning_rate: float = 3e-3,
                    layers=DEFAULT_LAYERS, history: list | None = None) -> AudioClassifierParams:
    """Adam on mini-batches; ``history`` (if given) receives the mean loss per epoch.

    Raises :class:`scenedialog.numerics.NumericalError` if the loss diverges.
    """
    labels = np.array([y for _, y in dataset.train])
    if len(set(labels.tolist())) < 2:
        raise ValueError("training data must contain at least two classes")
    x = np.stack([w.samples for w, _ in dataset.train])
    params = AudioClassifierParams.init(len(dataset.class_names), layers, rng_seed,
                                        dataset.class_names)
    for epoch in range(epochs):
        order = np.random.default_rng([rng_seed, epoch]).permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            params.store.zero_grad()
            loss = batch_loss(params, x[idx], labels[idx])
            if not math.isfinite(loss):
                raise nx.NumericalError(f"audio classifier loss diverged in epoch {epoch + 1}")
            params.store.clip_grad_norm(5.0)
            params.store.adam_step(learning_rate)
            total += loss * len(idx)
        if history is not None:
            history.append(total / len(order))
    return params


# ---------------------------------------------------------------------------
# Feature sequences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSequence:
    modality: str
    frames: np.ndarray
    source_tag: str = "aclnet_standin"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"unknown feature source {self.source_tag!r}")
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError("feature frames must be a non-empty T x D matrix")
        nx.check_finite("feature frames", frames)
        object.__setattr__(self, "frames", frames)

    @property
    def shape(self):
        return self.frames.shape


def window_starts(num_samples: int, window: int, hop: int) -> list[int]:
    if window <= 0 or hop <= 0:
        raise ValueError("window and hop must be positive")
    if num_samples < window:
        raise ValueError(f"waveform has {num_samples} samples, shorter than one window ({window})")
    return list(range(0, num_samples - window + 1, hop))


def embed_audio(params: AudioClassifierParams, waveform: Waveform, window_s: float = 1.0,
                hop_s: float = 1.0) -> FeatureSequence:
    """One pooled embedding per window; T = 1 + floor((L - W) / hop)."""
    window = int(round(window_s * waveform.sample_rate))
    hop = int(round(hop_s * waveform.sample_rate))
    starts = window_starts(waveform.samples.size, window, hop)
    x = np.stack([waveform.samples[s:s + window] for s in starts])
    emb, _ = features_forward(params, x)
    return FeatureSequence("audio", emb, "aclnet_standin")


def save_features(path, features: FeatureSequence) -> None:
    T, D = features.shape
    lines = [f"{features.modality} {T} {D}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in features.frames]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path, source_tag: str | None = None) -> FeatureSequence:
    """Parse the text feature format; errors name the offending line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FeatureFormatError(f"{path}:1: empty feature file")
    head = lines[0].split()
    if len(head) != 3:
        raise FeatureFormatError(f"{path}:1: header must be 'modality T D'")
    modality = head[0]
    if modality not in MODALITIES:
        raise FeatureFormatError(f"{path}:1: unknown modality {modality!r}")
    try:
        T, D = int(head[1]), int(head[2])
    except ValueError:
        raise FeatureFormatError(f"{path}:1: T and D must be integers") from None
    if T < 1 or D < 1:
        raise FeatureFormatError(f"{path}:1: T and D must be positive")
    body = [(i, ln) for i, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(body) != T:
        raise FeatureFormatError(f"{path}:{len(lines) + 1}: header declares {T} rows, found {len(body)}")
    frames = np.empty((T, D))
    for r, (lineno, ln) in enumerate(body):
        parts = ln.split()
        if len(parts) != D:
            raise FeatureFormatError(f"{path}:{lineno}: expected {D} values, found {len(parts)}")
        try:
            frames[r] = [float(p) for p in parts]
        except ValueError:
            raise FeatureFormatError(f"{path}:{lineno}: non-numeric value") from None
        if not np.all(np.isfinite(frames[r])):
            raise FeatureFormatError(f"{path}:{lineno}: non-finite value")
    if source_tag is None:
        source_tag = "external_vggish" if modality == "audio" else "external_visual"
    return FeatureSequence(modality, frames, source_tag)


# ---------------------------------------------------------------------------
# Waveform files
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise FeatureFormatError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, waveform: Waveform) -> None:
    pcm = np.clip(np.round(waveform.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_float_text(path, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    values = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("#"):
            parts = stripped[1:].split()
            if len(parts) == 2 and parts[0] == "sample_rate":
                sample_rate = int(parts[1])
            continue
        try:
            values.extend(float(v) for v in stripped.split())
        except ValueError:
            raise FeatureFormatError(f"{path}:{lineno}: non-numeric sample") from None
    if not values:
        raise FeatureFormatError(f"{path}: no samples")
    return Waveform(np.array(values), sample_rate)


def read_waveform(path, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """WAV by extension ``.wav``, otherwise raw float text."""
    if str(path).lower().endswith(".wav"):
        return read_wav(path)
    return read_float_text(path, sample_rate)
