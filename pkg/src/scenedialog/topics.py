"""LDA and seeded (guided) LDA by collapsed Gibbs sampling.

Topic models are trained per text source -- questions (Q), answers (A),
question/answer pairs (QA), captions (C), dialog history (H) and history plus
caption (HC) -- and their per-document topic distributions are concatenated
into feature vectors for the dialog model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .corpus import RESERVED_TOKENS, Dialog, Vocabulary

SOURCE_ORDER = ("Q", "A", "QA", "C", "H", "HC")

DEFAULT_BETA = 0.01
DEFAULT_ITERATIONS = 500
DEFAULT_FOLD_IN = 50
DEFAULT_SEED_CONFIDENCE = 0.85
DEFAULT_SEED_BOOST = 100.0

_N_RESERVED = len(RESERVED_TOKENS)


def default_alpha(num_topics: int) -> float:
    return 50.0 / num_topics


@dataclass(frozen=True)
class SeedSet:
    topic_names: tuple[str, ...]
    seeds: tuple[tuple[str, ...], ...]
    num_topics: int
    seed_confidence: float = DEFAULT_SEED_CONFIDENCE

    def __post_init__(self):
        if len(self.topic_names) != len(self.seeds):
            raise ValueError("one name per seeded topic required")
        if self.num_topics < len(self.seeds):
            raise ValueError(f"num_topics={self.num_topics} < {len(self.seeds)} seeded topics")
        if not 0.0 < self.seed_confidence <= 1.0:
            raise ValueError("seed_confidence must lie in (0, 1]")
        owner = {}
        for k, words in enumerate(self.seeds):
            for w in words:
                if owner.setdefault(w, k) != k:
                    raise ValueError(f"seed word {w!r} appears in topics {owner[w]} and {k}")

    @property
    def names(self) -> list[str]:
        extra = [f"topic{k}" for k in range(len(self.seeds), self.num_topics)]
        return list(self.topic_names) + extra


def parse_seed_lines(lines, num_topics=None, seed_confidence=DEFAULT_SEED_CONFIDENCE):
    """Parse ``"Name: w1, w2, ..."`` lines.

    Words listed under more than one topic carry no topic preference and are
    dropped from every list. Returns ``(SeedSet, warnings)``.
    """
    names, lists = [], []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ValueError(f"seed line {lineno}: expected 'TopicName: word, ...'")
        name, _, rest = line.partition(":")
        words = [w.strip().lower() for w in rest.split(",")]
        words = [w for w in words if w and w != "..."]
        names.append(name.strip())
        lists.append(list(dict.fromkeys(words)))
    if not names:
        raise ValueError("seed file lists no topics")
    counts = {}
    for words in lists:
        for w in words:
            counts[w] = counts.get(w, 0) + 1
    shared = sorted(w for w, c in counts.items() if c > 1)
    warnings = [f"seed word {w!r} is listed under several topics; dropped" for w in shared]
    seeds = tuple(tuple(w for w in words if counts[w] == 1) for words in lists)
    for name, words in zip(names, seeds):
        if not words:
            raise ValueError(f"topic {name!r} has no unambiguous seed words")
    seed_set = SeedSet(tuple(names), seeds, num_topics or len(names), seed_confidence)
    return seed_set, warnings


def load_seed_file(path, num_topics=None, seed_confidence=DEFAULT_SEED_CONFIDENCE):
    text = Path(path).read_text(encoding="utf-8")
    return parse_seed_lines(text.splitlines(), num_topics, seed_confidence)


@dataclass
class TopicModel:
    phi: np.ndarray
    alpha: float
    beta: float
    vocab: Vocabulary
    source_tag: str = "Q"
    topic_names: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()
    log_likelihood: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        K, V = self.phi.shape
        if K < 2 or V < 2:
            raise ValueError(f"topic model needs K >= 2 and V >= 2, got {K}x{V}")
        if V != len(self.vocab):
            raise ValueError("phi columns must match the vocabulary size")
        if self.source_tag not in SOURCE_ORDER:
            raise ValueError(f"unknown source tag {self.source_tag!r}")
        if not self.topic_names:
            object.__setattr__(self, "topic_names", tuple(f"topic{k}" for k in range(K)))

    @property
    def num_topics(self) -> int:
        return self.phi.shape[0]

    def top_words(self, n=10) -> list[list[str]]:
        out = []
        for row in self.phi:
            order = np.argsort(-row[_N_RESERVED:], kind="stable")[:n] + _N_RESERVED
            out.append([self.vocab.itos[i] for i in order])
        return out


@dataclass
class GibbsState:
    """Flat token assignments and the three count tables."""

    words: np.ndarray
    docs: np.ndarray
    z: np.ndarray
    ndk: np.ndarray
    nkw: np.ndarray
    nk: np.ndarray

    @classmethod
    def from_assignments(cls, words, docs, z, num_docs, K, V):
        ndk = np.zeros((num_docs, K), dtype=np.int64)
        nkw = np.zeros((K, V), dtype=np.int64)
        np.add.at(ndk, (docs, z), 1)
        np.add.at(nkw, (z, words), 1)
        return cls(words, docs, z, ndk, nkw, nkw.sum(axis=1))

    def check_consistent(self):
        n = self.words.shape[0]
        assert self.nkw.sum() == n and self.ndk.sum() == n and self.nk.sum() == n
        assert np.array_equal(self.nk, self.nkw.sum(axis=1))
        assert (self.nkw >= 0).all() and (self.ndk >= 0).all()


def _flatten(docs, vocab):
    words, doc_ids = [], []
    for d, doc in enumerate(docs):
        for tok in doc:
            i = vocab.stoi.get(tok)
            if i is not None and i >= _N_RESERVED:
                words.append(i)
                doc_ids.append(d)
    return np.array(words, dtype=np.intc), np.array(doc_ids, dtype=np.intc)


def _log_likelihood(state, alpha, phi):
    theta = (state.ndk + alpha) / (state.ndk.sum(axis=1, keepdims=True) + alpha * state.ndk.shape[1])
    p = np.einsum("ik,ki->i", theta[state.docs], phi[:, state.words])
    return float(np.log(p).sum())


def _run_gibbs(state, alpha, beta_kw, iterations, rng, kernels, trace, debug):
    beta_k = beta_kw.sum(axis=1)
    lls = []
    for _ in range(iterations):
        uniforms = rng.random(state.words.shape[0])
        kernels.gibbs.gibbs_sweep(state.words, state.docs, state.z, state.ndk, state.nkw,
                                  state.nk, alpha, beta_kw, beta_k, uniforms)
        if debug:
            state.check_consistent()
        if trace:
            lls.append(_log_likelihood(state, alpha, _phi(state, beta_kw)))
    return lls


def _phi(state, beta_kw):
    return (state.nkw + beta_kw) / (state.nk + beta_kw.sum(axis=1))[:, None]


def _prepare(docs, vocab, min_count):
    if not docs:
        raise ValueError("no documents to train on")
    if vocab is None:
        vocab = Vocabulary.from_sequences(docs, min_count)
    words, doc_ids = _flatten(docs, vocab)
    if words.size == 0:
        raise ValueError("all documents are empty after vocabulary filtering")
    return vocab, words, doc_ids


def train_lda(docs: Sequence[Sequence[str]], K: int, alpha: float | None = None,
              beta: float = DEFAULT_BETA, iterations: int = DEFAULT_ITERATIONS,
              rng_seed: int = 0, vocab: Vocabulary | None = None, source_tag: str = "Q",
              min_count: int = 1, trace: bool = False, debug: bool = False,
              kernels=None) -> TopicModel:
    """Standard LDA; ``phi`` comes from the final counts with beta smoothing."""
    if K < 2:
        raise ValueError("LDA needs at least 2 topics")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    alpha = default_alpha(K) if alpha is None else alpha
    vocab, words, doc_ids = _prepare(docs, vocab, min_count)
    V = len(vocab)
    rng = np.random.default_rng(rng_seed)
    z = rng.integers(0, K, size=words.shape[0]).astype(np.intc)
    state = GibbsState.from_assignments(words, doc_ids, z, len(docs), K, V)
    beta_kw = np.full((K, V), beta)
    lls = _run_gibbs(state, alpha, beta_kw, iterations, rng, kernels or _kernels.active, trace, debug)
    return TopicModel(_phi(state, beta_kw), alpha, beta, vocab, source_tag, log_likelihood=lls)


def train_guided_lda(docs: Sequence[Sequence[str]], seed_set: SeedSet, alpha: float | None = None,
                     beta: float = DEFAULT_BETA, iterations: int = DEFAULT_ITERATIONS,
                     rng_seed: int = 0, vocab: Vocabulary | None = None, source_tag: str = "Q",
                     seed_boost: float = DEFAULT_SEED_BOOST, min_count: int = 1,
                     trace: bool = False, debug: bool = False, kernels=None) -> TopicModel:
    """LDA biased toward seed words.

    Seed-word occurrences start in their seeded topic with probability
    ``seed_confidence`` and the (topic, seed word) prior is multiplied by
    ``seed_boost``. Seeds missing from the vocabulary are reported in
    ``model.warnings``.
    """
    K = seed_set.num_topics
    if K < 2:
        raise ValueError("LDA needs at least 2 topics")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    alpha = default_alpha(K) if alpha is None else alpha
    vocab, words, doc_ids = _prepare(docs, vocab, min_count)
    V = len(vocab)

    warnings = []
    seed_topic = np.full(V, -1, dtype=np.intp)
    for k, (name, seeds) in enumerate(zip(seed_set.topic_names, seed_set.seeds)):
        usable = 0
        for w in seeds:
            i = vocab.stoi.get(w)
            if i is None or i < _N_RESERVED:
                warnings.append(f"seed word {w!r} ({name}) not in vocabulary")
                continue
            seed_topic[i] = k
            usable += 1
        if not usable:
            raise ValueError(f"seeded topic {name!r} has no seed words in the vocabulary")

    rng = np.random.default_rng(rng_seed)
    z = rng.integers(0, K, size=words.shape[0])
    keep_seed = rng.random(words.shape[0]) < seed_set.seed_confidence
    token_seed = seed_topic[words]
    forced = (token_seed >= 0) & keep_seed
    z[forced] = token_seed[forced]
    z = z.astype(np.intc)

    beta_kw = np.full((K, V), beta)
    seeded = np.nonzero(seed_topic >= 0)[0]
    beta_kw[seed_topic[seeded], seeded] *= seed_boost

    state = GibbsState.from_assignments(words, doc_ids, z, len(docs), K, V)
    lls = _run_gibbs(state, alpha, beta_kw, iterations, rng, kernels or _kernels.active, trace, debug)
    return TopicModel(_phi(state, beta_kw), alpha, beta, vocab, source_tag,
                      topic_names=tuple(seed_set.names), warnings=tuple(warnings),
                      log_likelihood=lls)


@dataclass(frozen=True)
class DocumentTopics:
    theta: np.ndarray


def infer_topics(model: TopicModel, doc: Sequence[str], fold_in_iterations: int = DEFAULT_FOLD_IN,
                 rng_seed: int = 0, kernels=None) -> DocumentTopics:
    """Fold-in Gibbs sampling with ``phi`` held fixed."""
    K = model.num_topics
    words, _ = _flatten([doc], model.vocab)
    if words.size == 0:
        return DocumentTopics(np.full(K, 1.0 / K))
    kernels = kernels or _kernels.active
    rng = np.random.default_rng(rng_seed)
    z = rng.integers(0, K, size=words.shape[0]).astype(np.intc)
    nd = np.bincount(z, minlength=K).astype(np.int64)
    phi = np.ascontiguousarray(model.phi)
    for _ in range(fold_in_iterations):
        kernels.gibbs.foldin_sweep(words, z, nd, phi, model.alpha, rng.random(words.shape[0]))
    return DocumentTopics((nd + model.alpha) / (words.shape[0] + K * model.alpha))


def topic_feature_vector(models: Sequence[TopicModel], doc_by_source: Mapping[str, Sequence[str]],
                         fold_in_iterations: int = DEFAULT_FOLD_IN, rng_seed: int = 0) -> np.ndarray:
    """Concatenate per-source topic distributions in Q, A, QA, C, H, HC order."""
    by_tag = {}
    for m in models:
        if m.source_tag in by_tag:
            raise ValueError(f"duplicate topic model for source {m.source_tag!r}")
        by_tag[m.source_tag] = m
    parts = []
    for tag in SOURCE_ORDER:
        if tag not in by_tag:
            continue
        if tag not in doc_by_source:
            raise KeyError(f"no document supplied for source {tag!r}")
        parts.append(infer_topics(by_tag[tag], doc_by_source[tag], fold_in_iterations, rng_seed).theta)
    return np.concatenate(parts) if parts else np.zeros(0)


def ordered_models(models: Sequence[TopicModel]) -> list[TopicModel]:
    return sorted(models, key=lambda m: SOURCE_ORDER.index(m.source_tag))


# ---------------------------------------------------------------------------
# Source documents
# ---------------------------------------------------------------------------

def training_documents(dialogs: Sequence[Dialog], tag: str) -> list[list[str]]:
    if tag == "Q":
        return [list(q) for d in dialogs for q, _ in d.turns]
    if tag == "A":
        return [list(a) for d in dialogs for _, a in d.turns]
    if tag == "QA":
        return [list(q) + list(a) for d in dialogs for q, a in d.turns]
    if tag == "C":
        return [list(d.caption) for d in dialogs]
    if tag == "H":
        return [[t for q, a in d.turns for t in (*q, *a)] for d in dialogs]
    if tag == "HC":
        return [list(d.caption) + [t for q, a in d.turns for t in (*q, *a)] for d in dialogs]
    raise ValueError(f"unknown source tag {tag!r}")


def context_documents(dialog: Dialog, turn: int) -> dict[str, list[str]]:
    """Per-source documents visible when answering ``turn`` (no answer leakage)."""
    past = dialog.turns[:turn]
    history = [t for q, a in past for t in (*q, *a)]
    return {
        "Q": list(dialog.turns[turn][0]),
        "A": [t for _, a in past for t in a],
        "QA": history,
        "C": list(dialog.caption),
        "H": history,
        "HC": list(dialog.caption) + history,
    }


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_topic_model(model: TopicModel, path) -> None:
    """Text format: ``K V alpha beta`` header, K rows of V probabilities, then
    ``source``, ``topic`` and ``vocab`` sections."""
    K, V = model.phi.shape
    lines = [f"{K} {V} {model.alpha!r} {model.beta!r}"]
    lines += [" ".join(repr(float(p)) for p in row) for row in model.phi]
    lines.append(f"source {model.source_tag}")
    lines += [f"topic {name}" for name in model.topic_names]
    lines.append("vocab")
    lines += model.vocab.itos
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_topic_model(path) -> TopicModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        K, V, alpha, beta = lines[0].split()
        K, V, alpha, beta = int(K), int(V), float(alpha), float(beta)
    except (IndexError, ValueError):
        raise ValueError(f"{path}: line 1: expected header 'K V alpha beta'") from None
    phi = np.empty((K, V))
    for k in range(K):
        row = lines[1 + k].split()
        if len(row) != V:
            raise ValueError(f"{path}: line {k + 2}: expected {V} probabilities, got {len(row)}")
        phi[k] = [float(x) for x in row]
    pos = 1 + K
    tag = lines[pos].split()[1]
    names = tuple(line[len("topic "):] for line in lines[pos + 1:pos + 1 + K])
    pos += 1 + K
    if lines[pos] != "vocab":
        raise ValueError(f"{path}: line {pos + 1}: expected 'vocab'")
    itos = lines[pos + 1:pos + 1 + V]
    return TopicModel(phi, alpha, beta, Vocabulary(itos), tag, topic_names=names)

