"""Experiment specs, example assembly, the training loop and run checkpoints.

An experiment is described by ``key = value`` lines (``#`` starts a comment).
Keys are the :class:`ExperimentSpec` fields plus every
:class:`~scenedialog.model.ModelConfig` field except ``vocab_size`` and
``topic_dim``, which are derived from the data. Relative paths are resolved
against the working directory given to :func:`resolve`.

Mini-batch ``s`` is drawn from ``default_rng([rng_seed, s])`` so a resumed run
sees the same batches as an unbroken one.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import topics as tp
from .audioclf import load_features
from .corpus import Dialog, Vocabulary, build_vocab, label_turn, load_dataset
from .metrics import EvalPair
from .model import DialogContext, DialogModel, ModelConfig, make_context, read_word_vectors

DERIVED_CONFIG_FIELDS = ("vocab_size", "topic_dim")
PATH_FIELDS = ("dataset", "eval_dataset", "topic_dir", "audio_features", "visual_features",
               "word_vectors", "output")
LOG_COLUMNS = ("step", "loss", "grad_norm", "eval_loss")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment settings (a usage error)."""


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    dataset: str = ""
    eval_dataset: str = ""
    topic_dir: str = ""
    topic_sources: tuple[str, ...] = ()
    audio_features: str = ""
    visual_features: str = ""
    word_vectors: str = ""
    output: str = ""
    rng_seed: int = 0
    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 16
    clip_norm: float = 5.0
    eval_every: int = 50
    stop_loss: float = 0.0
    min_count: int = 1
    fold_in_iterations: int = tp.DEFAULT_FOLD_IN
    model: dict = field(default_factory=dict)

    def validate(self):
        if not self.name or any(ch.isspace() or ch in "/\\" for ch in self.name):
            raise ConfigError(f"experiment name {self.name!r} must be a non-empty single word")
        if not self.dataset:
            raise ConfigError("dataset is required")
        for tag in self.topic_sources:
            if tag not in tp.SOURCE_ORDER:
                raise ConfigError(f"unknown topic source {tag!r}")
        if self.topic_sources and not self.topic_dir:
            raise ConfigError("topic_sources needs topic_dir")
        for key in ("steps", "batch_size", "eval_every", "min_count"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for key in self.model:
            if key not in ModelConfig.__dataclass_fields__ or key in DERIVED_CONFIG_FIELDS:
                raise ConfigError(f"unknown or derived model setting {key!r}")
        return self

    @property
    def run_dir(self) -> str:
        return self.output or f"runs/{self.name}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["topic_sources"] = list(self.topic_sources)
        return d

    @classmethod
    def from_dict(cls, data) -> "ExperimentSpec":
        data = dict(data)
        data["topic_sources"] = tuple(data.get("topic_sources", ()))
        return cls(**data)


def _coerce(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "optional_int":
            return None if raw.lower() in ("", "none", "all") else int(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    return raw


_SPEC_TYPES = {"rng_seed": int, "steps": int, "batch_size": int, "eval_every": int,
               "min_count": int, "fold_in_iterations": int, "learning_rate": float,
               "clip_norm": float, "stop_loss": float}
_MODEL_TYPES = {"embed_dim": int, "hidden_dim": int, "history_turns": "optional_int",
                "av_dim": int, "beam_width": int, "max_decode_len": int, "use_visual": bool}


def apply_settings(spec: ExperimentSpec, settings: dict[str, str]) -> ExperimentSpec:
    """Overlay string settings (from flags or a config file) onto ``spec``."""
    spec_fields = {f.name for f in fields(ExperimentSpec)} - {"model"}
    for key, raw in settings.items():
        if key in spec_fields:
            if key == "topic_sources":
                value = tuple(t for t in raw.replace(",", " ").split())
            else:
                value = _coerce(_SPEC_TYPES.get(key, str), raw, key)
            setattr(spec, key, value)
        elif key in ModelConfig.__dataclass_fields__ and key not in DERIVED_CONFIG_FIELDS:
            spec.model[key] = _coerce(_MODEL_TYPES.get(key, str), raw, key)
        else:
            raise ConfigError(f"unknown setting {key!r}")
    return spec


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    settings = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in settings:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        settings[key] = value
    return settings


def format_config(spec: ExperimentSpec) -> str:
    lines = []
    for f in fields(ExperimentSpec):
        if f.name == "model":
            continue
        value = getattr(spec, f.name)
        if f.name == "topic_sources":
            value = ",".join(value)
        lines.append(f"{f.name} = {value}")
    for key in sorted(spec.model):
        value = spec.model[key]
        lines.append(f"{key} = {'all' if value is None else value}")
    return "\n".join(lines) + "\n"


def resolve(workdir, path):
    if not path:
        return None
    p = Path(path)
    return p if p.is_absolute() else Path(workdir) / p


# ---------------------------------------------------------------------------
# Data assembly
# ---------------------------------------------------------------------------

@dataclass
class ExperimentData:
    dialogs: list[Dialog]
    vocab: Vocabulary
    config: ModelConfig
    contexts: list[DialogContext]
    topic_models: list[tp.TopicModel]


def topic_model_path(topic_dir, tag) -> Path:
    return Path(topic_dir) / f"topics_{tag}.txt"


def load_topic_models(spec: ExperimentSpec, workdir) -> list[tp.TopicModel]:
    models = []
    for tag in spec.topic_sources:
        path = topic_model_path(resolve(workdir, spec.topic_dir), tag)
        if not path.exists():
            raise FileNotFoundError(f"topic model for source {tag} not found: {path}")
        model = tp.load_topic_model(path)
        if model.source_tag != tag:
            raise ValueError(f"{path}: holds source {model.source_tag!r}, expected {tag!r}")
        models.append(model)
    return tp.ordered_models(models)


def load_feature_dir(directory, modality, dialogs) -> dict[str, np.ndarray]:
    """One ``<video_id>.txt`` feature file per dialog."""
    out, width = {}, None
    for d in dialogs:
        path = Path(directory) / f"{d.video_id}.txt"
        if not path.exists():
            raise FileNotFoundError(f"missing {modality} features for {d.video_id}: {path}")
        feats = load_features(path)
        if feats.modality != modality:
            raise ValueError(f"{path}: declares modality {feats.modality!r}, expected {modality!r}")
        if width is not None and feats.shape[1] != width:
            raise ValueError(f"{path}: width {feats.shape[1]} differs from {width}")
        width = feats.shape[1]
        out[d.video_id] = feats.frames
    return out


def build_contexts(dialogs, vocab, topic_models, features, fold_in_iterations=tp.DEFAULT_FOLD_IN,
                   rng_seed=0) -> list[DialogContext]:
    """One context per (dialog, turn) in file order."""
    contexts = []
    for d in dialogs:
        av = {mod: table[d.video_id] for mod, table in features.items()}
        for turn in range(len(d.turns)):
            topic = None
            if topic_models:
                topic = tp.topic_feature_vector(topic_models, tp.context_documents(d, turn),
                                                fold_in_iterations, rng_seed)
            contexts.append(make_context(d, turn, vocab, av, topic))
    return contexts


def model_config(spec: ExperimentSpec, vocab_size: int, topic_dim: int, av_dim: int) -> ModelConfig:
    settings = dict(spec.model)
    try:
        return ModelConfig(vocab_size=vocab_size, topic_dim=topic_dim,
                           av_dim=settings.pop("av_dim", av_dim) or av_dim, **settings)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from None


def load_features_for(spec, workdir, dialogs, config_like: dict) -> dict[str, dict]:
    features = {}
    if config_like.get("audio_mode", "none") == "fuse":
        if not spec.audio_features:
            raise ConfigError("audio_mode = fuse needs audio_features")
        features["audio"] = load_feature_dir(resolve(workdir, spec.audio_features), "audio", dialogs)
    if config_like.get("use_visual", False):
        if not spec.visual_features:
            raise ConfigError("use_visual needs visual_features")
        features["visual"] = load_feature_dir(resolve(workdir, spec.visual_features), "visual", dialogs)
    return features


def prepare(spec: ExperimentSpec, workdir, dataset=None, vocab: Vocabulary | None = None,
            config: ModelConfig | None = None) -> ExperimentData:
    """Load data, topics and features; derive vocab and config when not given."""
    dialogs, _ = load_dataset(resolve(workdir, dataset or spec.dataset))
    if vocab is None:
        vocab = build_vocab(dialogs, spec.min_count)
    topic_models = load_topic_models(spec, workdir)
    topic_dim = sum(m.num_topics for m in topic_models)
    features = load_features_for(spec, workdir, dialogs,
                                 config.to_dict() if config else spec.model)
    av_dims = {table[next(iter(table))].shape[1] for table in features.values() if table}
    if len(av_dims) > 1:
        raise ConfigError(f"audio and visual features differ in width: {sorted(av_dims)}")
    if config is None:
        config = model_config(spec, len(vocab), topic_dim, av_dims.pop() if av_dims else 0)
    elif config.topic_dim != topic_dim and config.topic_mode != "none":
        raise ConfigError(f"checkpoint expects topic_dim {config.topic_dim}, topics give {topic_dim}")
    if config.topic_mode == "none":
        topic_models = []
    contexts = build_contexts(dialogs, vocab, topic_models, features, spec.fold_in_iterations,
                              spec.rng_seed)
    return ExperimentData(dialogs, vocab, config, contexts, topic_models)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def batch_indices(n: int, batch_size: int, rng_seed: int, step: int) -> np.ndarray:
    if batch_size >= n:
        return np.arange(n)
    rng = np.random.default_rng([rng_seed, step])
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def mean_loss(model: DialogModel, contexts: Sequence[DialogContext]) -> float:
    pairs = model.example_losses(contexts)
    return sum(l for l, _ in pairs) / sum(n for _, n in pairs)


@dataclass
class TrainState:
    step: int = 0
    best_loss: float = math.inf
    best_step: int = -1
    rows: list = field(default_factory=list)


def train_steps(model: DialogModel, contexts: Sequence[DialogContext], spec: ExperimentSpec,
                state: TrainState | None = None, eval_contexts=None, on_best=None) -> TrainState:
    """Run Adam until ``spec.steps`` (or ``stop_loss`` reached at an eval point).

    Every ``eval_every`` steps the mean loss over ``eval_contexts`` (default:
    the training contexts) is logged and ``on_best`` is called when it
    improves. Eval points depend only on the step number, so an interrupted
    and resumed run logs exactly what an unbroken one does.
    """
    state = state or TrainState()
    eval_contexts = eval_contexts or contexts
    store = model.store
    while state.step < spec.steps:
        idx = batch_indices(len(contexts), spec.batch_size, spec.rng_seed, state.step)
        store.zero_grad()
        loss = model.forward_loss([contexts[i] for i in idx])
        if not math.isfinite(loss):
            raise nx.NumericalError(f"loss is {loss} at step {state.step}")
        norm = store.clip_grad_norm(spec.clip_norm)
        store.adam_step(spec.learning_rate)
        state.step += 1
        eval_loss = ""
        if state.step % spec.eval_every == 0:
            eval_loss = mean_loss(model, eval_contexts)
            if eval_loss < state.best_loss:
                state.best_loss, state.best_step = eval_loss, state.step
                if on_best is not None:
                    on_best(state)
        state.rows.append((state.step, loss, norm, eval_loss))
        if eval_loss != "" and spec.stop_loss and eval_loss <= spec.stop_loss:
            break
    return state


def log_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for step, loss, norm, eval_loss in rows:
        w.writerow([step, repr(float(loss)), repr(float(norm)),
                    "" if eval_loss == "" else repr(float(eval_loss))])
    return buf.getvalue()


def read_log_csv(text: str) -> list:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append((int(rec["step"]), float(rec["loss"]), float(rec["grad_norm"]),
                     "" if rec["eval_loss"] == "" else float(rec["eval_loss"])))
    return rows


def checkpoint_metadata(spec: ExperimentSpec, data: ExperimentData, state: TrainState) -> dict:
    return {
        "spec": spec.to_dict(),
        "config": data.config.to_dict(),
        "vocab": list(data.vocab.itos),
        "vocab_min_count": data.vocab.min_count,
        "step": state.step,
        "best_loss": None if math.isinf(state.best_loss) else state.best_loss,
        "best_step": state.best_step,
        "kernel_backend": (model_kernels_name()),
    }


def model_kernels_name() -> str:
    from . import _kernels
    return _kernels.active.name


def restore(path, with_optimizer=True):
    """Load a run checkpoint; returns ``(model, spec, vocab, metadata)``."""
    store, meta = nx.load_checkpoint(path)
    if "config" not in meta or "vocab" not in meta:
        raise ValueError(f"{path}: not an experiment checkpoint")
    if not with_optimizer:
        store.step = 0
    config = ModelConfig.from_dict(meta["config"])
    vocab = Vocabulary(list(meta["vocab"]), meta.get("vocab_min_count", 1))
    spec = ExperimentSpec.from_dict(meta["spec"])
    return DialogModel(config, store=store), spec, vocab, meta


def load_word_vectors_into(model: DialogModel, vocab: Vocabulary, path) -> int:
    return model.load_word_vectors(read_word_vectors(path), vocab)


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def eval_pairs(model: DialogModel, data: ExperimentData, vocab: Vocabulary,
               beam_width: int | None = None) -> tuple[list[EvalPair], dict]:
    """Generate an answer for every context; returns pairs and the hypothesis table."""
    pairs, hyps = [], {}
    by_key = {(d.video_id, t): d.turns[t] for d in data.dialogs for t in range(len(d.turns))}
    for ctx in data.contexts:
        question, answer = by_key[ctx.key]
        out = vocab.decode(model.generate(ctx, beam_width=beam_width), strip_special=True)
        hyps[ctx.key] = tuple(out)
        pairs.append(EvalPair(tuple(out), (tuple(answer),), label_turn(question, answer), ctx.key))
    return pairs, hyps
