"""Caption-style answer metrics and binary-answer precision/recall.

All scores are computed on token sequences as produced by
:func:`scenedialog.corpus.tokenize`. Corpus-level functions take a list of
:class:`EvalPair` and return plain floats, so reports can be assembled per
analysis subset.

* ``bleu``: corpus-level modified n-gram precision (clipped by the maximum
  count over references) with a brevity penalty computed against the closest
  reference length (ties go to the shorter one). ``BLEU_n`` is the geometric
  mean of precisions 1..n. ``mode="sentence"`` averages per-pair scores with
  add-one smoothing for n >= 2.
* ``rouge_l``: LCS F-measure with recall weight 1.2, best reference per pair,
  averaged over pairs.
* ``cider``: CIDEr-D as in the coco-caption toolkit (document frequencies over
  reference sets, clipped TF-IDF cosine, Gaussian length penalty sigma=6,
  mean over n=1..4, x10).
* ``meteor_lite``: unigram alignment where two tokens match when their
  suffix-stripped stems agree (identical tokens always do). The alignment has
  maximum size and, among those, the fewest chunks.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import SUBSET_KINDS, TurnLabels, answer_polarity, tokenize

METRIC_NAMES = ("BLEU_1", "BLEU_2", "BLEU_3", "BLEU_4", "METEOR", "ROUGE_L", "CIDEr")
SUBSETS = ("overall",) + SUBSET_KINDS
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
METEOR_ALPHA = 0.9  # recall weight 9: Fmean = PR / (alpha P + (1 - alpha) R)
METEOR_GAMMA = 0.5
METEOR_THETA = 3.0
STEM_SUFFIXES = ("ing", "ed", "es", "s")


class MetricWarning(UserWarning):
    """Degenerate input for a corpus statistic (e.g. CIDEr-D on one pair)."""


@dataclass(frozen=True)
class EvalPair:
    hypothesis: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]
    labels: TurnLabels | None = None
    key: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "hypothesis", tuple(self.hypothesis))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        if not any(self.references):
            raise ValueError("an evaluation pair needs at least one non-empty reference")


def make_pairs(hypotheses: Iterable[Sequence[str]], references: Iterable) -> list[EvalPair]:
    """Zip hypotheses with references; a bare token list counts as one reference."""
    pairs = []
    for hyp, refs in zip(hypotheses, references, strict=True):
        if refs and isinstance(refs[0], str):
            refs = [refs]
        pairs.append(EvalPair(tuple(hyp), tuple(tuple(r) for r in refs)))
    return pairs


def _require(pairs):
    if not pairs:
        raise ValueError("no evaluation pairs")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _closest_ref_len(hyp_len, refs):
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def _clipped_counts(hyp, refs, n):
    counts = ngrams(hyp, n)
    max_ref = Counter()
    for r in refs:
        for g, c in ngrams(r, n).items():
            max_ref[g] = max(max_ref[g], c)
    matched = sum(min(c, max_ref[g]) for g, c in counts.items())
    return matched, sum(counts.values())


def _brevity_penalty(hyp_len, ref_len):
    if hyp_len == 0:
        return 0.0
    if hyp_len > ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / hyp_len)


def _geometric_bleu(precisions, bp):
    out, log_sum = [], 0.0
    for n, p in enumerate(precisions, start=1):
        if p <= 0.0 or math.isinf(log_sum):
            log_sum = -math.inf
            out.append(0.0)
            continue
        log_sum += math.log(p)
        out.append(bp * math.exp(log_sum / n))
    return out


def bleu(pairs: Sequence[EvalPair], max_n: int = 4, mode: str = "corpus") -> list[float]:
    """Cumulative BLEU_1..BLEU_max_n."""
    _require(pairs)
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    if mode == "sentence":
        totals = [0.0] * max_n
        for pair in pairs:
            precisions = []
            for n in range(1, max_n + 1):
                m, c = _clipped_counts(pair.hypothesis, pair.references, n)
                if n >= 2:
                    m, c = m + 1, c + 1
                precisions.append(m / c if c else 0.0)
            bp = _brevity_penalty(len(pair.hypothesis),
                                  _closest_ref_len(len(pair.hypothesis), pair.references))
            for n, s in enumerate(_geometric_bleu(precisions, bp)):
                totals[n] += s
        return [t / len(pairs) for t in totals]
    if mode != "corpus":
        raise ValueError(f"unknown BLEU mode {mode!r}")
    return _geometric_bleu(*bleu_precisions(pairs, max_n))


def bleu_precisions(pairs: Sequence[EvalPair], max_n: int = 4) -> tuple[list[float], float]:
    """Corpus clipped precisions ``p_1..p_max_n`` and the brevity penalty."""
    _require(pairs)
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for pair in pairs:
        hyp_len += len(pair.hypothesis)
        ref_len += _closest_ref_len(len(pair.hypothesis), pair.references)
        for n in range(1, max_n + 1):
            m, c = _clipped_counts(pair.hypothesis, pair.references, n)
            matched[n - 1] += m
            total[n - 1] += c
    precisions = [m / c if c else 0.0 for m, c in zip(matched, total)]
    return precisions, _brevity_penalty(hyp_len, ref_len)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_pair(hyp, ref, beta):
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(pairs: Sequence[EvalPair], beta: float = ROUGE_BETA) -> float:
    _require(pairs)
    return sum(max(_rouge_pair(p.hypothesis, r, beta) for r in p.references if r)
               for p in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

def _cider_vec(tokens, n, df, log_n):
    vec = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, n).items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def cider(pairs: Sequence[EvalPair], sigma: float = CIDER_SIGMA, max_n: int = 4) -> float:
    """CIDEr-D corpus score in [0, 10]."""
    _require(pairs)
    if len({p.references for p in pairs}) < 2:
        warnings.warn("CIDEr-D needs at least two distinct reference sets; "
                      "document frequencies are degenerate", MetricWarning, stacklevel=2)
    df = [Counter() for _ in range(max_n)]
    for p in pairs:
        for n in range(1, max_n + 1):
            seen = set()
            for r in p.references:
                seen.update(ngrams(r, n))
            df[n - 1].update(seen)
    log_n = math.log(len(pairs))
    total = 0.0
    for p in pairs:
        hyp_vecs = [_cider_vec(p.hypothesis, n, df[n - 1], log_n) for n in range(1, max_n + 1)]
        per_ref = 0.0
        for ref in p.references:
            delta = len(p.hypothesis) - len(ref)
            penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
            acc = 0.0
            for n in range(1, max_n + 1):
                hv, hn = hyp_vecs[n - 1]
                rv, rn = _cider_vec(ref, n, df[n - 1], log_n)
                if hn == 0.0 or rn == 0.0:
                    continue
                dot = sum(min(w, rv[g]) * rv[g] for g, w in hv.items() if g in rv)
                acc += penalty * dot / (hn * rn)
            per_ref += acc / max_n
        total += CIDER_SCALE * per_ref / len(p.references)
    return total / len(pairs)


# ---------------------------------------------------------------------------
# METEOR-lite
# ---------------------------------------------------------------------------

def stem(word: str) -> str:
    """Strip one of -ing/-ed/-es/-s (not -ss), then a final -e.

    Each strip keeps at least three characters, so ``cats``/``cat`` and
    ``makes``/``making``/``make`` unify while ``glass`` and ``sees`` survive.
    """
    for suffix in STEM_SUFFIXES:
        if word.endswith(suffix) and len(word) - len(suffix) >= 3:
            if suffix == "s" and word.endswith("ss"):
                break
            word = word[:-len(suffix)]
            break
    if word.endswith("e") and len(word) >= 4:
        word = word[:-1]
    return word


def meteor_alignment(hyp: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """``(matches, chunks)`` for a maximum-size, minimum-chunk stem alignment."""
    hs = [stem(w) for w in hyp]
    rs = [stem(w) for w in ref]
    need = Counter()
    hc, rc = Counter(hs), Counter(rs)
    for s in hc:
        need[s] = min(hc[s], rc[s])
    matches = sum(need.values())
    if matches == 0:
        return 0, 0
    candidates = [tuple(j for j, r in enumerate(rs) if r == h) for h in hs]
    later = [Counter(hs[i + 1:]) for i in range(len(hs))]

    @lru_cache(maxsize=None)
    def best(i, used, prev):
        # Minimum further chunks for hyp[i:], given the ref positions in use
        # and the ref index aligned to hyp[i-1] (-1 when it was unaligned).
        if i == len(hs):
            return 0
        s = hs[i]
        done = sum(1 for j in range(len(rs)) if used >> j & 1 and rs[j] == s)
        out = math.inf
        if done < need[s]:
            for j in candidates[i]:
                if not used >> j & 1:
                    cost = 0 if prev >= 0 and j == prev + 1 else 1
                    out = min(out, cost + best(i + 1, used | (1 << j), j))
        if done + later[i][s] >= need[s]:
            out = min(out, best(i + 1, used, -1))
        return out

    return matches, best(0, 0, -1)


def _meteor_pair(hyp, ref):
    m, chunks = meteor_alignment(hyp, ref)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    return fmean * (1.0 - METEOR_GAMMA * (chunks / m) ** METEOR_THETA)


def meteor_lite(pairs: Sequence[EvalPair]) -> float:
    _require(pairs)
    return sum(max(_meteor_pair(p.hypothesis, r) for r in p.references if r)
               for p in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# Binary answers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolarityScore:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


def reference_polarity(pair: EvalPair) -> str | None:
    if pair.labels is not None:
        return pair.labels.polarity
    return answer_polarity(pair.references[0])


def binary_prf(pairs: Sequence[EvalPair]) -> dict[str, PolarityScore]:
    """Per-polarity counts; a hypothesis with no yes/no lead token is a miss."""
    if not pairs:
        raise ValueError("binary subset is empty")
    counts = {"yes": [0, 0, 0], "no": [0, 0, 0]}
    for pair in pairs:
        gold = reference_polarity(pair)
        if gold is None:
            raise ValueError(f"pair {pair.key} has a non-binary reference")
        pred = answer_polarity(pair.hypothesis)
        if pred == gold:
            counts[gold][0] += 1
        else:
            counts[gold][2] += 1
            if pred is not None:
                counts[pred][1] += 1
    return {k: PolarityScore(*v) for k, v in counts.items()}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def corpus_scores(pairs: Sequence[EvalPair]) -> dict[str, float]:
    b = bleu(pairs)
    scores = {f"BLEU_{n}": b[n - 1] for n in range(1, 5)}
    scores["METEOR"] = meteor_lite(pairs)
    scores["ROUGE_L"] = rouge_l(pairs)
    with warnings.catch_warnings():
        # small subsets routinely hold a single pair; the score is still defined
        warnings.simplefilter("ignore", MetricWarning)
        scores["CIDEr"] = cider(pairs)
    return scores


@dataclass
class EvalReport:
    variant: str
    pair_count: int
    scores: dict[str, float]
    subsets: dict[str, dict] = field(default_factory=dict)
    binary: dict[str, dict] | None = None

    def to_dict(self) -> dict:
        return {"variant": self.variant, "pair_count": self.pair_count, "scores": self.scores,
                "subsets": self.subsets, "binary_prf": self.binary}


def select_subset(pairs: Sequence[EvalPair], subset: str) -> list[EvalPair]:
    if subset == "overall":
        return list(pairs)
    if subset not in SUBSET_KINDS:
        raise ValueError(f"unknown subset {subset!r}")
    missing = [p.key for p in pairs if p.labels is None]
    if missing:
        raise ValueError(f"pairs without subset labels: {missing[:3]}")
    return [p for p in pairs if p.labels.has(subset)]


def evaluate(pairs: Sequence[EvalPair], variant: str = "model",
             subsets: Sequence[str] = SUBSETS) -> EvalReport:
    """Scores over all pairs plus one block per requested subset.

    Empty subsets are reported with ``count = 0`` and no scores.
    """
    _require(pairs)
    report = EvalReport(variant, len(pairs), corpus_scores(pairs))
    for name in subsets:
        chosen = select_subset(pairs, name)
        report.subsets[name] = {"count": len(chosen),
                                "scores": corpus_scores(chosen) if chosen else None}
    if "binary" in subsets:
        chosen = select_subset(pairs, "binary")
        if chosen:
            report.binary = {k: v.as_dict() for k, v in binary_prf(chosen).items()}
    return report


def report_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n"


def _fmt(x):
    return "-" if x is None else f"{x:.4f}"


def format_table(reports: Sequence[EvalReport], subsets: Sequence[str] | None = None) -> str:
    """Aligned text: one section per subset, one row per variant, one column per metric."""
    if not reports:
        raise ValueError("no reports to format")
    subsets = list(subsets or reports[0].subsets)
    width = max(len("variant"), *(len(r.variant) for r in reports))
    header = f"{'variant':<{width}}  {'n':>5}  " + "  ".join(f"{m:>8}" for m in METRIC_NAMES)
    lines = []
    for name in subsets:
        lines += [f"[{name}]", header]
        for r in reports:
            block = r.subsets.get(name, {"count": 0, "scores": None})
            scores = block["scores"] or {}
            cells = "  ".join(f"{_fmt(scores.get(m)):>8}" for m in METRIC_NAMES)
            lines.append(f"{r.variant:<{width}}  {block['count']:>5}  {cells}")
        lines.append("")
    binaries = [r for r in reports if r.binary]
    if binaries:
        lines += ["[binary_prf]",
                  f"{'variant':<{width}}  {'polarity':>8}  {'P':>8}  {'R':>8}  {'F1':>8}"]
        for r in binaries:
            for pol in ("yes", "no"):
                s = r.binary[pol]
                lines.append(f"{r.variant:<{width}}  {pol:>8}  {_fmt(s['precision']):>8}  "
                             f"{_fmt(s['recall']):>8}  {_fmt(s['f1']):>8}")
        lines.append("")
    return "\n".join(lines)


def plot_csv(reports: Sequence[EvalReport]) -> str:
    """Long-format rows ``subset,variant,metric,value`` for external plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", "variant", "metric", "value"])
    for r in reports:
        for name, block in r.subsets.items():
            for m in METRIC_NAMES:
                if block["scores"] is not None:
                    w.writerow([name, r.variant, m, repr(block["scores"][m])])
        if r.binary:
            for pol in ("yes", "no"):
                for m in ("precision", "recall", "f1"):
                    w.writerow(["binary", r.variant, f"{m}_{pol}", repr(r.binary[pol][m])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Hypothesis files: "video_id turn_index hypothesis text"
# ---------------------------------------------------------------------------

def write_hypotheses(path, hypotheses: Mapping[tuple[str, int], Sequence[str]]) -> None:
    lines = []
    for (vid, turn), toks in sorted(hypotheses.items()):
        if any(ch.isspace() for ch in vid):
            raise ValueError(f"video id {vid!r} contains whitespace")
        lines.append(f"{vid} {turn} {' '.join(toks)}".rstrip())
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_hypotheses(path) -> dict[tuple[str, int], tuple[str, ...]]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(maxsplit=2)
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected 'video_id turn_index text'")
        try:
            turn = int(parts[1])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: turn index {parts[1]!r} is not an integer") from None
        key = (parts[0], turn)
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate entry for {key}")
        out[key] = tuple(tokenize(parts[2])) if len(parts) == 3 else ()
    return out
