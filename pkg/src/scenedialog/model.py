"""Hierarchical encoder / attention decoder for scene-aware dialog.

Data flow for one (context, answer) example::

    caption + last n QA turns --word LSTM--> per-turn states --sentence LSTM--> history states
    question                  --question LSTM--> question code
    audio / visual features   --mean-pool + affine--> AV slots, summed into the AV code
    [question code ; last history state ; AV code] --affine + tanh--> decoder h0

The decoder LSTM consumes ``[token embedding ; attention context ; topic
feature]`` at every step. The attention query is the previous decoder hidden
state and the memory depends on ``attention_mode``:

    word_all     every word-LSTM output of every turn, zero-padded per turn
                 (the sentence LSTM is not used in this mode)
    word_last    the last word-LSTM state of each turn
    sent_all     every sentence-LSTM output
    sent_all_av  sentence-LSTM outputs plus one slot per AV modality

Topic vectors enter the decoder input directly (``decoder_feature``), through
a learned projection (``topic_embedding``), or as an extra input of every
sentence-LSTM step (``hlstm_feature``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import BOS, EOS, UNK, Dialog, Vocabulary

ATTENTION_MODES = ("none", "word_all", "word_last", "sent_all", "sent_all_av")
TOPIC_MODES = ("none", "decoder_feature", "hlstm_feature", "topic_embedding")
AUDIO_MODES = ("none", "fuse")


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    history_turns: int | None = None
    attention_mode: str = "none"
    topic_mode: str = "none"
    topic_dim: int = 0
    audio_mode: str = "none"
    use_visual: bool = False
    av_dim: int = 0
    beam_width: int = 1
    max_decode_len: int = 20
    attention_score: str = "additive"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "beam_width", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the reserved tokens plus one word")
        if self.history_turns is not None and self.history_turns < 0:
            raise ValueError("history_turns must be >= 0 or None (all)")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.topic_mode not in TOPIC_MODES:
            raise ValueError(f"unknown topic_mode {self.topic_mode!r}")
        if self.audio_mode not in AUDIO_MODES:
            raise ValueError(f"unknown audio_mode {self.audio_mode!r}")
        if self.attention_score not in ("additive", "dot"):
            raise ValueError(f"unknown attention_score {self.attention_score!r}")
        if self.topic_mode != "none" and self.topic_dim <= 0:
            raise ValueError("topic_mode requires topic_dim > 0")
        if self.modalities and self.av_dim < 1:
            raise ValueError("AV fusion requires av_dim >= 1")
        if self.attention_mode == "sent_all_av" and not self.modalities:
            raise ValueError("sent_all_av needs audio_mode='fuse' or visual features")
        if self.topic_mode == "hlstm_feature" and self.attention_mode == "word_all":
            raise ValueError("hlstm_feature needs the sentence LSTM, which word_all removes")

    @property
    def modalities(self) -> tuple[str, ...]:
        mods = []
        if self.audio_mode == "fuse":
            mods.append("audio")
        if self.use_visual:
            mods.append("visual")
        return tuple(mods)

    @property
    def uses_sentence_lstm(self) -> bool:
        return self.attention_mode != "word_all"

    @property
    def topic_input_width(self) -> int:
        if self.topic_mode == "decoder_feature":
            return self.topic_dim
        if self.topic_mode == "topic_embedding":
            return self.embed_dim
        return 0

    @property
    def decoder_input_width(self) -> int:
        att = self.hidden_dim if self.attention_mode != "none" else 0
        return self.embed_dim + att + self.topic_input_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class DialogContext:
    """Model inputs for answering one question (token ids, not strings)."""

    caption: np.ndarray
    history: list[np.ndarray]
    question: np.ndarray
    answer: np.ndarray | None = None
    av_features: dict[str, np.ndarray] = field(default_factory=dict)
    topic_vector: np.ndarray | None = None
    key: tuple = ()


def make_context(dialog: Dialog, turn: int, vocab: Vocabulary, av_features=None,
                 topic_vector=None) -> DialogContext:
    """Context for ``dialog.turns[turn]``: caption plus every earlier QA pair."""
    ids = lambda toks: np.array(vocab.encode(toks) or [UNK], dtype=np.intp)
    question, answer = dialog.turns[turn]
    return DialogContext(
        caption=ids(dialog.caption),
        history=[ids(q + a) for q, a in dialog.turns[:turn]],
        question=ids(question),
        answer=np.array(vocab.encode(answer), dtype=np.intp),
        av_features=dict(av_features or {}),
        topic_vector=None if topic_vector is None else np.asarray(topic_vector, dtype=np.float64),
        key=(dialog.video_id, turn),
    )


def read_word_vectors(path) -> dict[str, np.ndarray]:
    """Text vectors, one ``token v1 ... vE`` per line, all rows the same width."""
    vectors, width = {}, None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric vector entry") from None
            if width is None:
                width = vec.size
            if vec.size != width or width == 0:
                raise ValueError(f"{path}:{lineno}: expected {width} values, found {vec.size}")
            vectors[parts[0]] = vec
    return vectors


@dataclass
class EncodedContext:
    question_code: np.ndarray
    history_word_states: list[np.ndarray]
    history_word_last: np.ndarray
    history_sentence_states: np.ndarray
    av_code: np.ndarray | None
    av_slots: list[np.ndarray]
    decoder_h0: np.ndarray

    @property
    def num_turns(self) -> int:
        return len(self.history_word_states)


@dataclass(frozen=True)
class AttentionWeights:
    weights: np.ndarray


@dataclass
class _EncodeCache:
    turns: list[np.ndarray]
    word_tapes: list
    q_ids: np.ndarray
    q_tape: object
    sent_tape: object
    av_pooled: list[np.ndarray]
    init_z: np.ndarray
    topic: np.ndarray | None


class DialogModel:
    """Parameters plus forward, backward and decoding for one configuration."""

    def __init__(self, config: ModelConfig, rng_seed: int = 0, store: nx.ParamStore | None = None,
                 kernels=None):
        config.validate()
        self.config = config
        self.kernels = kernels
        if store is None:
            store = self._init_params(np.random.default_rng(rng_seed))
        self.store = store
        self._check_shapes()

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng):
        c = self.config
        E, H, V = c.embed_dim, c.hidden_dim, c.vocab_size
        u = lambda *shape: rng.uniform(-nx.INIT_SCALE, nx.INIT_SCALE, shape)
        s = nx.ParamStore()
        s.add("embed", u(V, E))
        s.add_lstm("word_lstm", E, H, rng)
        if c.uses_sentence_lstm:
            extra = c.topic_dim if c.topic_mode == "hlstm_feature" else 0
            s.add_lstm("sent_lstm", H + extra, H, rng)
        s.add_lstm("q_lstm", E, H, rng)
        for mod in c.modalities:
            s.add(f"av.{mod}.W", u(H, c.av_dim))
            s.add(f"av.{mod}.b", np.zeros(H))
        s.add("init.W", u(H, self._init_width()))
        s.add("init.b", np.zeros(H))
        if c.attention_mode != "none" and c.attention_score == "additive":
            s.add("att.Wq", u(H, H))
            s.add("att.Wm", u(H, H))
            s.add("att.v", u(H))
        if c.topic_mode == "topic_embedding":
            s.add("topic.P", u(c.topic_dim, E))
        s.add_lstm("dec_lstm", c.decoder_input_width, H, rng)
        s.add("out.W", u(V, H))
        s.add("out.b", np.zeros(V))
        return s

    def _init_width(self):
        c = self.config
        return c.hidden_dim * (1 + c.uses_sentence_lstm + bool(c.modalities))

    def _check_shapes(self):
        c, s = self.config, self.store
        if s["embed"].shape != (c.vocab_size, c.embed_dim):
            raise ValueError("embedding table does not match config")
        if s["dec_lstm.Wx"].shape != (4 * c.hidden_dim, c.decoder_input_width):
            raise ValueError(
                f"decoder input width {s['dec_lstm.Wx'].shape[1]} != "
                f"embed_dim + attention + topic = {c.decoder_input_width}")

    def load_word_vectors(self, vectors: Mapping[str, np.ndarray], vocab: Vocabulary) -> int:
        """Overwrite embedding rows with pretrained vectors; returns rows set."""
        table = self.store["embed"]
        found = 0
        for tok, vec in vectors.items():
            i = vocab.stoi.get(tok)
            if i is None:
                continue
            if vec.shape != (table.shape[1],):
                raise ValueError(f"word vector for {tok!r} has width {vec.shape[0]}, expected {table.shape[1]}")
            table[i] = vec
            found += 1
        return found

    # -- encoder ------------------------------------------------------------

    def _topic(self, ctx):
        c = self.config
        if c.topic_mode == "none":
            return None
        t = ctx.topic_vector
        if t is None or t.shape != (c.topic_dim,):
            raise ValueError(f"topic_mode={c.topic_mode} needs a topic vector of length {c.topic_dim}")
        return t

    def _encode(self, ctx: DialogContext):
        c, s, k = self.config, self.store, self.kernels
        if len(ctx.question) == 0:
            raise ValueError("question must be non-empty")
        n = c.history_turns
        hist = ctx.history if n is None else (ctx.history[-n:] if n else [])
        turns = [ctx.caption] + list(hist)
        emb = s["embed"]
        word_lstm = s.lstm("word_lstm")
        word_states, word_tapes = [], []
        for ids in turns:
            out, tape = nx.lstm_forward(word_lstm, emb[ids], kernels=k)
            word_states.append(out)
            word_tapes.append(tape)
        lasts = np.stack([w[-1] for w in word_states])

        q_out, q_tape = nx.lstm_forward(s.lstm("q_lstm"), emb[ctx.question], kernels=k)
        q_code = q_out[-1]

        topic = self._topic(ctx)
        z_parts = [q_code]
        sent_tape = None
        sent_states = np.zeros((0, c.hidden_dim))
        if c.uses_sentence_lstm:
            sent_in = lasts
            if c.topic_mode == "hlstm_feature":
                sent_in = np.hstack([lasts, np.tile(topic, (len(turns), 1))])
            sent_states, sent_tape = nx.lstm_forward(s.lstm("sent_lstm"), sent_in, kernels=k)
            z_parts.append(sent_states[-1])

        pooled, slots = [], []
        for mod in c.modalities:
            feats = ctx.av_features.get(mod)
            if feats is None:
                raise ValueError(f"missing {mod} features")
            feats = np.asarray(feats, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[1] != c.av_dim or feats.shape[0] < 1:
                raise ValueError(f"{mod} features have shape {feats.shape}, expected (T, {c.av_dim})")
            p = feats.mean(axis=0)
            pooled.append(p)
            slots.append(s[f"av.{mod}.W"] @ p + s[f"av.{mod}.b"])
        av_code = np.sum(slots, axis=0) if slots else None
        if av_code is not None:
            z_parts.append(av_code)
        z = np.concatenate(z_parts)
        h0 = np.tanh(s["init.W"] @ z + s["init.b"])

        enc = EncodedContext(q_code, word_states, lasts, sent_states, av_code, slots, h0)
        cache = _EncodeCache(turns, word_tapes, ctx.question, q_tape, sent_tape, pooled, z, topic)
        return enc, cache

    def encode(self, ctx: DialogContext) -> EncodedContext:
        return self._encode(ctx)[0]

    # -- attention ----------------------------------------------------------

    def memory(self, enc: EncodedContext, mode: str | None = None) -> np.ndarray:
        mode = mode or self.config.attention_mode
        H = self.config.hidden_dim
        if mode == "word_all":
            L = max(w.shape[0] for w in enc.history_word_states)
            mem = np.zeros((enc.num_turns, L, H))
            for i, w in enumerate(enc.history_word_states):
                mem[i, :w.shape[0]] = w
            return mem.reshape(-1, H)
        if mode == "word_last":
            return enc.history_word_last
        if mode == "sent_all":
            return enc.history_sentence_states
        if mode == "sent_all_av":
            return np.vstack([enc.history_sentence_states] + [s[None] for s in enc.av_slots])
        raise ValueError(f"no attention memory for mode {mode!r}")

    def _attend(self, query, memory):
        s = self.store
        if self.config.attention_score == "dot":
            return nx.dot_attention_forward(query, memory)
        return nx.additive_attention_forward(query, memory, s["att.Wq"], s["att.Wm"], s["att.v"])

    def attend(self, mode: str, decoder_state: np.ndarray, enc: EncodedContext):
        """Returns ``(context_vector, AttentionWeights)``."""
        if mode == "none":
            raise ValueError("attend() needs an attention mode")
        ctx_vec, weights, _ = self._attend(decoder_state, self.memory(enc, mode))
        return ctx_vec, AttentionWeights(weights)

    # -- decoder ------------------------------------------------------------

    def _topic_feature(self, topic):
        mode = self.config.topic_mode
        if mode == "decoder_feature":
            return topic
        if mode == "topic_embedding":
            return topic @ self.store["topic.P"]
        return None

    def initial_state(self, enc: EncodedContext):
        return enc.decoder_h0, np.zeros(self.config.hidden_dim)

    def decode_step(self, prev_token: int, state, enc: EncodedContext, topic_vector=None,
                    memory=None):
        """One decoder step; returns ``(logits, (h, c), AttentionWeights | None)``."""
        logits, state, weights, _ = self._decode_step(prev_token, state, enc, topic_vector, memory)
        return logits, state, None if weights is None else AttentionWeights(weights)

    def _decode_step(self, prev_token, state, enc, topic_vector, memory):
        c, s = self.config, self.store
        if not 0 <= prev_token < c.vocab_size:
            raise IndexError(f"token index {prev_token} outside vocabulary of size {c.vocab_size}")
        h, cell = state
        parts = [s["embed"][prev_token]]
        att_cache = weights = None
        if c.attention_mode != "none":
            if memory is None:
                memory = self.memory(enc)
            ctx_vec, weights, att_cache = self._attend(h, memory)
            parts.append(ctx_vec)
        tfeat = None
        if c.topic_mode in ("decoder_feature", "topic_embedding"):
            if topic_vector is None:
                raise ValueError("topic vector required for this topic_mode")
            tfeat = self._topic_feature(topic_vector)
            parts.append(tfeat)
        x = np.concatenate(parts)
        h_new, c_new, gates = nx.lstm_step(s.lstm("dec_lstm"), x, h, cell, self.kernels)
        logits = s["out.W"] @ h_new + s["out.b"]
        return logits, (h_new, c_new), weights, (prev_token, x, h, cell, c_new, gates, att_cache)

    # -- training -----------------------------------------------------------

    def _example_loss(self, ctx: DialogContext, scale: float | None, backward: bool):
        c, s = self.config, self.store
        if ctx.answer is None:
            raise ValueError("training example needs a target answer")
        enc, ecache = self._encode(ctx)
        topic = ecache.topic
        memory = self.memory(enc) if c.attention_mode != "none" else None
        inputs = [BOS] + [int(t) for t in ctx.answer]
        targets = [int(t) for t in ctx.answer] + [EOS]
        state = self.initial_state(enc)
        total = 0.0
        steps = []
        for prev, tgt in zip(inputs, targets):
            logits, state, _, step_cache = self._decode_step(prev, state, enc, topic, memory)
            loss, dlogits = nx.softmax_xent(logits, tgt)
            total += loss
            steps.append((step_cache, state[0], dlogits))
        if backward:
            self._backward(enc, ecache, memory, steps, scale if scale is not None else 1.0 / len(targets))
        return total, len(targets)

    def _backward(self, enc, ecache, memory, steps, scale):
        c, s, g = self.config, self.store, self.store.grads
        H = c.hidden_dim
        dec = s.lstm("dec_lstm")
        dec_g = s.lstm_grads("dec_lstm")
        E = c.embed_dim
        att = c.attention_mode != "none"
        dmemory = np.zeros_like(memory) if att else None
        dtfeat_total = np.zeros(c.topic_input_width)

        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for (prev, x, h_prev, c_prev, c_new, gates, att_cache), h_new, dlogits in reversed(steps):
            dl = dlogits * scale
            g["out.W"] += np.outer(dl, h_new)
            g["out.b"] += dl
            dh = s["out.W"].T @ dl + dh_next
            dx, dh_prev, dc_prev = nx.lstm_step_backward(dec, x, h_prev, c_prev, c_new, gates,
                                                         dh, dc_next, dec_g, self.kernels)
            g["embed"][prev] += dx[:E]
            off = E
            if att:
                dctx = dx[off:off + H]
                off += H
                if c.attention_score == "dot":
                    dq, dmem = nx.dot_attention_backward(dctx, att_cache)
                else:
                    dq, dmem, dWq, dWm, dv = nx.additive_attention_backward(dctx, att_cache)
                    g["att.Wq"] += dWq
                    g["att.Wm"] += dWm
                    g["att.v"] += dv
                dmemory += dmem
                dh_prev = dh_prev + dq
            if c.topic_input_width:
                dtfeat_total += dx[off:]
            dh_next, dc_next = dh_prev, dc_prev
        # c0 of the decoder is a constant zero vector; its gradient is dropped.

        if c.topic_mode == "topic_embedding":
            g["topic.P"] += np.outer(ecache.topic, dtfeat_total)

        dpre = dh_next * (1.0 - enc.decoder_h0 ** 2)
        g["init.W"] += np.outer(dpre, ecache.init_z)
        g["init.b"] += dpre
        dz = s["init.W"].T @ dpre
        dq_code = dz[:H]
        off = H
        n_turns = enc.num_turns
        d_sent = np.zeros((n_turns, H)) if c.uses_sentence_lstm else None
        if c.uses_sentence_lstm:
            d_sent[-1] += dz[off:off + H]
            off += H
        dav_code = dz[off:off + H] if c.modalities else None

        d_word = [np.zeros_like(w) for w in enc.history_word_states]
        d_lasts = np.zeros((n_turns, H))
        d_slots = [dav_code.copy() for _ in c.modalities] if c.modalities else []
        if att:
            mode = c.attention_mode
            if mode == "word_all":
                L = dmemory.shape[0] // n_turns
                dm = dmemory.reshape(n_turns, L, H)
                for i, w in enumerate(d_word):
                    w += dm[i, :w.shape[0]]
            elif mode == "word_last":
                d_lasts += dmemory
            elif mode == "sent_all":
                d_sent += dmemory
            elif mode == "sent_all_av":
                d_sent += dmemory[:n_turns]
                for j in range(len(d_slots)):
                    d_slots[j] += dmemory[n_turns + j]

        for mod, pooled, dslot in zip(c.modalities, ecache.av_pooled, d_slots):
            g[f"av.{mod}.W"] += np.outer(dslot, pooled)
            g[f"av.{mod}.b"] += dslot

        if c.uses_sentence_lstm:
            _, d_sent_in, _, _ = nx.lstm_backward(ecache.sent_tape, d_sent, grads=s.lstm_grads("sent_lstm"))
            d_lasts += d_sent_in[:, :H]

        word_g = s.lstm_grads("word_lstm")
        for ids, tape, dw, dlast in zip(ecache.turns, ecache.word_tapes, d_word, d_lasts):
            dw[-1] += dlast
            _, dxs, _, _ = nx.lstm_backward(tape, dw, grads=word_g)
            np.add.at(g["embed"], ids, dxs)

        dq_out = np.zeros((len(ecache.q_ids), H))
        dq_out[-1] = dq_code
        _, dxs, _, _ = nx.lstm_backward(ecache.q_tape, dq_out, grads=s.lstm_grads("q_lstm"))
        np.add.at(g["embed"], ecache.q_ids, dxs)

    def forward_loss(self, batch: Sequence[DialogContext], backward: bool = True) -> float:
        """Mean token cross-entropy over ``batch``; gradients are added to the store."""
        if not batch:
            raise ValueError("empty batch")
        n_tokens = sum(len(ctx.answer) + 1 for ctx in batch)
        scale = 1.0 / n_tokens
        total = 0.0
        for ctx in batch:
            loss, _ = self._example_loss(ctx, scale, backward)
            total += loss
        return total / n_tokens

    def example_losses(self, batch: Sequence[DialogContext]) -> list[tuple[float, int]]:
        """Per-example ``(summed token loss, token count)`` without gradients."""
        return [self._example_loss(ctx, None, False) for ctx in batch]

    # -- generation ---------------------------------------------------------

    def generate(self, ctx: DialogContext, beam_width: int | None = None,
                 max_decode_len: int | None = None) -> list[int]:
        """Greedy (beam_width=1) or length-normalized beam search; no BOS/EOS in output."""
        c = self.config
        beam_width = beam_width or c.beam_width
        max_len = max_decode_len or c.max_decode_len
        enc, ecache = self._encode(ctx)
        topic = ecache.topic
        memory = self.memory(enc) if c.attention_mode != "none" else None
        state = self.initial_state(enc)
        if beam_width == 1:
            out = []
            prev = BOS
            for _ in range(max_len):
                logits, state, _, _ = self._decode_step(prev, state, enc, topic, memory)
                prev = int(np.argmax(logits))
                if prev == EOS:
                    break
                out.append(prev)
            return out
        return self._beam_search(enc, topic, memory, state, beam_width, max_len)

    def _beam_search(self, enc, topic, memory, state, width, max_len):
        alive = [((), 0.0, state)]
        finished = []
        for _ in range(max_len):
            candidates = []
            for tokens, score, st in alive:
                prev = tokens[-1] if tokens else BOS
                logits, new_st, _, _ = self._decode_step(prev, st, enc, topic, memory)
                shifted = logits - logits.max()
                logp = shifted - np.log(np.exp(shifted).sum())
                for tok in np.argsort(-logp, kind="stable")[:width]:
                    candidates.append((tokens + (int(tok),), score + float(logp[tok]), new_st))
            candidates.sort(key=lambda cand: -cand[1])
            alive = []
            for tokens, score, st in candidates[:width]:
                if tokens[-1] == EOS:
                    finished.append((tokens, score))
                else:
                    alive.append((tokens, score, st))
            if not alive:
                break
        pool = finished + [(t, s) for t, s, _ in alive]
        best = max(pool, key=lambda ts: ts[1] / len(ts[0]))[0]
        return [t for t in best if t != EOS]
