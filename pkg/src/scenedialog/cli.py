"""Command-line entry point: ``scenedialog <command> [--flags]``.

Commands: ``ingest``, ``topics``, ``train``, ``eval`` and ``generate``. All
flags are long-form. ``--config FILE`` reads ``key = value`` lines whose keys
are the command's flag names with dashes replaced by underscores (for
``train``: any experiment or model setting); values from the file override
flags. Every path is taken relative to ``--workdir`` (default: the current
directory).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from pathlib import Path

from . import experiment as ex
from . import metrics as mt
from . import numerics as nx
from . import topics as tp
from .audioclf import FeatureFormatError
from .corpus import SUBSET_KINDS, DatasetError, load_dataset, subset_counts

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_LAST = "checkpoint_last.sdck"
CHECKPOINT_BEST = "checkpoint_best.sdck"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out(text, stream=None):
    (stream or sys.stdout).write(text if text.endswith("\n") else text + "\n")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _stamp(run_dir: Path, event: str):
    """Wall-clock times go to a sidecar so every other output is reproducible."""
    run_dir.mkdir(parents=True, exist_ok=True)
    now = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    with open(run_dir / "timestamps.log", "a", encoding="utf-8") as fh:
        fh.write(f"{now} {event}\n")


def _apply_config(args, parser):
    """Overlay ``--config`` settings onto parsed flags (file wins)."""
    if not args.config:
        return {}
    path = ex.resolve(args.workdir, args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    settings = ex.parse_config_text(path.read_text(encoding="utf-8"), str(path))
    if args.command == "train":
        return settings
    actions = {a.dest: a for a in parser._subparser_actions[args.command]._actions}
    for key, raw in settings.items():
        action = actions.get(key)
        if action is None or key in ("config", "workdir", "help"):
            raise ex.ConfigError(f"{path}: unknown setting {key!r} for {args.command}")
        if isinstance(action, argparse._AppendAction):
            value = [v.strip() for v in raw.split(",") if v.strip()]
        elif isinstance(action, argparse._StoreTrueAction):
            value = ex._coerce(bool, raw, key)
        else:
            value = action.type(raw) if action.type else raw
        setattr(args, key, value)
    return {}


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    rows = []
    for split, rel in _split_paths(args.dataset):
        dialogs, stats = load_dataset(ex.resolve(args.workdir, rel), split)
        rows.append({"split": split, "path": rel, "dialogs": stats.num_dialogs,
                     "turns": stats.num_turns, "words": stats.num_words,
                     "subsets": subset_counts(dialogs)})
    width = max(len("split"), *(len(r["split"]) for r in rows))
    pw = max(len("path"), *(len(r["path"]) for r in rows))
    lines = [f"{'split':<{width}}  {'path':<{pw}}  {'dialogs':>8}  {'turns':>8}  {'words':>9}  "
             + "  ".join(f"{k:>13}" for k in SUBSET_KINDS)]
    for r in rows:
        lines.append(f"{r['split']:<{width}}  {r['path']:<{pw}}  {r['dialogs']:>8}  {r['turns']:>8}  {r['words']:>9}  "
                     + "  ".join(f"{r['subsets'][k]:>13}" for k in SUBSET_KINDS))
    _out("\n".join(lines))
    if args.output:
        _write(ex.resolve(args.workdir, args.output),
               json.dumps({"datasets": rows}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _split_paths(values):
    """``--dataset val=path`` or bare ``--dataset path`` (split defaults to train)."""
    out = []
    for v in values:
        split, sep, path = v.partition("=")
        out.append((split, path) if sep else ("train", v))
    return out


# ---------------------------------------------------------------------------
# topics
# ---------------------------------------------------------------------------

def cmd_topics(args) -> int:
    if args.mode == "guided" and not args.seed_file:
        raise UsageError("guided mode needs --seed-file")
    if args.mode == "lda" and not args.num_topics:
        raise UsageError("lda mode needs --num-topics")
    dialogs = []
    for _, rel in _split_paths(args.dataset):
        dialogs += load_dataset(ex.resolve(args.workdir, rel))[0]
    tags = [t for t in args.sources.replace(",", " ").split()]
    for t in tags:
        if t not in tp.SOURCE_ORDER:
            raise UsageError(f"unknown topic source {t!r}; choose from {', '.join(tp.SOURCE_ORDER)}")
    out_dir = ex.resolve(args.workdir, args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = []
    seed_set = None
    if args.mode == "guided":
        seed_set, seed_warnings = tp.load_seed_file(ex.resolve(args.workdir, args.seed_file),
                                                    args.num_topics, args.seed_confidence)
        report += [f"warning: {w}" for w in seed_warnings]
    for tag in tags:
        docs = tp.training_documents(dialogs, tag)
        common = dict(alpha=args.alpha, beta=args.beta, iterations=args.iterations,
                      rng_seed=args.seed, source_tag=tag)
        if seed_set is None:
            model = tp.train_lda(docs, args.num_topics, **common)
        else:
            model = tp.train_guided_lda(docs, seed_set, **common)
        tp.save_topic_model(model, ex.topic_model_path(out_dir, tag))
        report.append(f"[{tag}] K={model.num_topics} V={len(model.vocab)} alpha={model.alpha!r} "
                      f"beta={model.beta!r}")
        report += [f"warning: {w}" for w in model.warnings]
        for name, words in zip(model.topic_names, model.top_words(10)):
            report.append(f"{name}: {' '.join(words)}")
        report.append("")
    text = "\n".join(report)
    _write(out_dir / "topics_report.txt", text + "\n")
    _out(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_FLAGS = ("name", "dataset", "eval_dataset", "topic_dir", "topic_sources", "audio_features",
                "visual_features", "word_vectors", "output", "rng_seed", "steps", "learning_rate",
                "batch_size", "clip_norm", "eval_every", "stop_loss", "min_count",
                "embed_dim", "hidden_dim", "history_turns", "attention_mode", "topic_mode",
                "audio_mode", "use_visual", "av_dim", "beam_width", "max_decode_len",
                "attention_score")


def build_spec(args, file_settings) -> ex.ExperimentSpec:
    settings = {}
    for key in _TRAIN_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = str(value)
    settings.update(file_settings)
    return ex.apply_settings(ex.ExperimentSpec(), settings).validate()


def cmd_train(args, file_settings) -> int:
    spec = build_spec(args, file_settings)
    run_dir = ex.resolve(args.workdir, spec.run_dir)
    data = ex.prepare(spec, args.workdir)
    eval_contexts = None
    if spec.eval_dataset:
        eval_contexts = ex.prepare(spec, args.workdir, spec.eval_dataset, data.vocab,
                                   data.config).contexts
    model = ex.DialogModel(data.config, rng_seed=spec.rng_seed)
    if spec.word_vectors:
        ex.load_word_vectors_into(model, data.vocab, ex.resolve(args.workdir, spec.word_vectors))
    state = ex.TrainState()
    if args.resume:
        model, state = _resume(run_dir, spec, data)
    run_dir.mkdir(parents=True, exist_ok=True)
    _stamp(run_dir, f"train start step={state.step}")

    def save_best(st):
        nx.save_checkpoint(run_dir / CHECKPOINT_BEST, model.store,
                           ex.checkpoint_metadata(spec, data, st))

    state = ex.train_steps(model, data.contexts, spec, state, eval_contexts, on_best=save_best)
    nx.save_checkpoint(run_dir / CHECKPOINT_LAST, model.store, ex.checkpoint_metadata(spec, data, state))
    _write(run_dir / "train_log.csv", ex.log_csv(state.rows))
    _write(run_dir / "config.txt", ex.format_config(spec))
    last = state.rows[-1] if state.rows else None
    final = last[3] if last and last[3] != "" else ex.mean_loss(model, eval_contexts or data.contexts)
    summary = {"name": spec.name, "steps": state.step, "final_loss": final,
               "best_loss": None if state.best_step < 0 else state.best_loss,
               "best_step": state.best_step,
               "num_parameters": model.store.num_values(), "vocab_size": data.config.vocab_size}
    _write(run_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _stamp(run_dir, f"train end step={state.step}")
    best = "none" if state.best_step < 0 else f"{state.best_loss:.6f} at step {state.best_step}"
    _out(f"{spec.name}: {state.step} steps, final loss {final:.6f}, best {best}")
    return EXIT_OK


def _resume(run_dir, spec, data):
    path = run_dir / CHECKPOINT_LAST
    if not path.exists():
        raise FileNotFoundError(f"nothing to resume: {path}")
    model, old_spec, vocab, meta = ex.restore(path)
    old = old_spec.to_dict()
    new = spec.to_dict()
    old.pop("steps"), new.pop("steps")
    if old != new or list(vocab.itos) != list(data.vocab.itos):
        raise ex.ConfigError("resume needs the same settings as the original run (except steps)")
    if meta["step"] > spec.steps:
        raise ex.ConfigError(f"checkpoint is at step {meta['step']}, beyond steps = {spec.steps}")
    rows = ex.read_log_csv((run_dir / "train_log.csv").read_text(encoding="utf-8"))
    state = ex.TrainState(meta["step"], meta["best_loss"] if meta["best_loss"] is not None
                          else float("inf"), meta["best_step"],
                          [r for r in rows if r[0] <= meta["step"]])
    return model, state


# ---------------------------------------------------------------------------
# eval / generate
# ---------------------------------------------------------------------------

def _load_for_decoding(args, checkpoint):
    model, spec, vocab, _ = ex.restore(ex.resolve(args.workdir, checkpoint), with_optimizer=False)
    dataset = args.dataset or spec.eval_dataset or spec.dataset
    data = ex.prepare(spec, args.workdir, dataset, vocab, model.config)
    return model, spec, vocab, data


def cmd_eval(args) -> int:
    subsets = [s for s in args.subsets.replace(",", " ").split()]
    for s in subsets:
        if s not in mt.SUBSETS:
            raise UsageError(f"unknown subset {s!r}; choose from {', '.join(mt.SUBSETS)}")
    out_dir = ex.resolve(args.workdir, args.output_dir)
    reports, seen = [], {}
    for ckpt in args.checkpoint:
        model, spec, vocab, data = _load_for_decoding(args, ckpt)
        name = spec.name
        seen[name] = seen.get(name, 0) + 1
        if seen[name] > 1:
            name = f"{name}_{seen[name]}"
        pairs, hyps = ex.eval_pairs(model, data, vocab, args.beam_width)
        reports.append(mt.evaluate(pairs, name, subsets))
        out_dir.mkdir(parents=True, exist_ok=True)
        mt.write_hypotheses(out_dir / f"hypotheses_{name}.txt", hyps)
    _write(out_dir / "report.json", mt.report_json(reports))
    table = mt.format_table(reports, subsets)
    _write(out_dir / "report.txt", table + "\n")
    _write(out_dir / "metrics.csv", mt.plot_csv(reports))
    _out(table)
    return EXIT_OK


def cmd_generate(args) -> int:
    model, _, vocab, data = _load_for_decoding(args, args.checkpoint)
    _, hyps = ex.eval_pairs(model, data, vocab, args.beam_width)
    if args.output:
        path = ex.resolve(args.workdir, args.output)
        path.parent.mkdir(parents=True, exist_ok=True)
        mt.write_hypotheses(path, hyps)
    else:
        for (vid, turn), toks in sorted(hyps.items()):
            _out(f"{vid} {turn} {' '.join(toks)}".rstrip())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    common = _Parser(add_help=False, allow_abbrev=False)
    common.add_argument("--workdir", default=".", help="root for every relative path")
    common.add_argument("--config", help="key = value settings; these override flags")
    parser = _Parser(prog="scenedialog", allow_abbrev=False,
                     description="Scene-aware dialog: data, topics, training and evaluation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    parser._subparser_actions = sub.choices

    p = sub.add_parser("ingest", parents=[common], allow_abbrev=False,
                       help="load dataset files and print statistics")
    p.add_argument("--dataset", action="append", required=True,
                   help="dataset file, optionally as split=path; repeatable")
    p.add_argument("--output", help="also write the statistics as JSON")

    p = sub.add_parser("topics", parents=[common], allow_abbrev=False,
                       help="train LDA / Guided LDA models per source")
    p.add_argument("--dataset", action="append", required=True, help="corpus file; repeatable")
    p.add_argument("--sources", default="Q", help="comma-separated source tags (Q,A,QA,C,H,HC)")
    p.add_argument("--mode", choices=("lda", "guided"), default="guided")
    p.add_argument("--seed-file", help="seed words, one 'Topic: w1, w2' line per topic")
    p.add_argument("--num-topics", type=int, help="K (guided default: number of seeded topics)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float, default=tp.DEFAULT_BETA)
    p.add_argument("--iterations", type=int, default=tp.DEFAULT_ITERATIONS)
    p.add_argument("--seed-confidence", type=float, default=tp.DEFAULT_SEED_CONFIDENCE)
    p.add_argument("--seed", type=int, default=0, help="sampler seed")
    p.add_argument("--output-dir", default="topics")

    p = sub.add_parser("train", parents=[common], allow_abbrev=False,
                       help="train a dialog model")
    p.add_argument("--resume", action="store_true", help="continue from the run's last checkpoint")
    for key in _TRAIN_FLAGS:
        flag = "--" + key.replace("_", "-")
        if key == "use_visual":
            p.add_argument(flag, dest=key, default=None, choices=("true", "false"))
        else:
            p.add_argument(flag, dest=key, default=None)

    for name, text in (("eval", "score generated answers per subset"),
                       ("generate", "write generated answers")):
        p = sub.add_parser(name, parents=[common], allow_abbrev=False, help=text)
        if name == "eval":
            p.add_argument("--checkpoint", action="append", required=True,
                           help="run checkpoint; repeat for a side-by-side table")
            p.add_argument("--subsets", default=",".join(mt.SUBSETS))
            p.add_argument("--output-dir", default="eval")
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--output", help="hypothesis file (default: stdout)")
        p.add_argument("--dataset", help="dialogs to answer (default: the run's eval/train set)")
        p.add_argument("--beam-width", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        file_settings = _apply_config(args, parser)
        if args.command == "ingest":
            return cmd_ingest(args)
        if args.command == "topics":
            return cmd_topics(args)
        if args.command == "train":
            return cmd_train(args, file_settings)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_generate(args)
    except (UsageError, ex.ConfigError) as exc:
        _out(f"usage error: {exc}", sys.stderr)
        return EXIT_USAGE
    except nx.NumericalError as exc:
        _out(f"numerical failure: {exc}", sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, FeatureFormatError, FileNotFoundError, OSError, ValueError,
            KeyError) as exc:
        _out(f"data error: {exc}", sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
