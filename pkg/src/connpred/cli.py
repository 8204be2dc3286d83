"""Command line interface: one pipeline stage per subcommand.

Subcommands read and write the documented file formats only, log to stderr,
and keep stdout pipeable. Training subcommands resolve their configuration
as flags > config file > built-in defaults and log the resolved values
verbatim before running. Data errors exit 1 with a one-line JSON object on
stderr; usage errors exit 2.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields

import numpy as np

from . import FORMAT_VERSIONS, __version__, nn
from . import wordpairs as wp
from .corpus import (
    CorpusError,
    ExtractStats,
    SplitSpec,
    build_splits,
    extract_pairs,
    iter_jsonl_articles,
    iter_text_articles,
    read_examples_tsv,
    read_split_dir,
    write_examples_tsv,
    write_split_dir,
)
from .da import DaConfig, DaError, DaModel, load_embeddings_text, train
from .evaluation import (
    EvalError,
    align_by_id,
    evaluate,
    macro_f1_ids,
    rater_analysis,
    read_predictions_tsv,
    read_raters_tsv,
    round2,
    write_confusion_csv,
    write_report_json,
)
from .text import ConnectiveLexicon, LexiconError, tokenize

log = logging.getLogger("connpred")


class CliError(Exception):
    pass


# every failure mode the subcommands are expected to turn into exit code 1
_DATA_ERRORS = (CliError, CorpusError, LexiconError, DaError, wp.WpError, EvalError,
                nn.NnError, OSError, ValueError)


def _coerce(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path):
    """JSON object or `key=value` lines; values in key=value files are
    parsed as JSON literals when possible, else kept as strings."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError("%s: %s" % (path, exc)) from None
        if not isinstance(doc, dict):
            raise CliError("%s: config must be a JSON object" % path)
        return doc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("%s:%d: expected key=value" % (path, lineno))
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(value.strip())
    return out


def resolve_config(cls, config_path, overrides):
    """Build a config dataclass with precedence flags > file > defaults."""
    valid = {f.name for f in fields(cls)}
    merged = {}
    if config_path:
        doc = read_config_file(config_path)
        unknown = sorted(set(doc) - valid)
        if unknown:
            raise CliError("unknown config keys: %s" % ", ".join(unknown))
        merged.update(doc)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise CliError("bad config: %s" % exc) from None


def _log_config(name, cfg):
    log.info("%s config: %s", name, json.dumps(asdict(cfg), sort_keys=True))


def _load_lexicon(path):
    return ConnectiveLexicon.load(path) if path else ConnectiveLexicon.default()


def _load_any_model(path):
    """Dispatch on the checkpoint magic so one --model flag serves both
    model families."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
    if magic == nn.MAGIC:
        return "da", DaModel.load(path)
    if magic == wp.WP_MAGIC:
        return "wp", wp.OvrModel.load(path)
    raise CliError("%s: unrecognized model file" % path)


def _wp_featurizer(model):
    if model.config.hashed:
        return wp.HashedFeaturizer(model.config.hash_buckets, model.config.include_arg1_singles)
    return model.feature_dict()


def _predict_labels(kind, model, examples):
    if kind == "da":
        ids, _ = model.predict_examples(examples)
        return [model.labels[i] for i in ids]
    feat = _wp_featurizer(model)
    vectors = [feat.featurize(e.arg1.tokens, e.arg2.tokens) for e in examples]
    return [model.labels[i] for i in model.predict_batch(vectors)]


def cmd_extract(args):
    lex = _load_lexicon(args.lexicon)
    stats = ExtractStats()
    if args.corpus:
        articles = iter_jsonl_articles(args.corpus, stats)
    else:
        articles = iter_text_articles(args.text, stats)
    examples = list(extract_pairs(articles, lex, stats, threads=args.threads))
    write_examples_tsv(args.out, examples, lex)
    log.info("extract stats: %s", json.dumps(stats.as_dict(), sort_keys=True))
    log.info("wrote %d pairs to %s", len(examples), args.out)


def cmd_build_dataset(args):
    lex = _load_lexicon(args.lexicon)
    spec = resolve_config(
        SplitSpec,
        args.config,
        {
            "dev_per_class": args.dev_per_class,
            "test_per_class": args.test_per_class,
            "train_per_class": args.train_per_class,
            "seed": args.seed,
        },
    )
    _log_config("split", spec)
    examples = read_examples_tsv(args.pairs, lex)
    split = build_splits(examples, lex.num_classes, spec)
    write_split_dir(args.out_dir, split, lex)
    log.info(
        "wrote splits to %s: train %d, dev %d, test %d",
        args.out_dir, len(split.train), len(split.dev), len(split.test),
    )


def _write_history(report_dir, history):
    import os

    os.makedirs(report_dir, exist_ok=True)
    path = os.path.join(report_dir, "history.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        for h in history:
            f1 = "" if h.dev_macro_f1 is None else repr(h.dev_macro_f1)
            fh.write("%d\t%r\t%s\n" % (h.step, h.loss, f1))
    from . import figures

    figures.save_training_curve(os.path.join(report_dir, "training_curve.png"), history)


def cmd_train_da(args):
    lex = _load_lexicon(args.lexicon)
    cfg = resolve_config(
        DaConfig,
        args.config,
        {
            "embed_dim": args.embed_dim,
            "hidden": args.hidden,
            "max_len": args.max_len,
            "dropout_attend": args.dropout_attend,
            "dropout_compare": args.dropout_compare,
            "dropout_classify": args.dropout_classify,
            "layer_norm": args.layer_norm,
            "learning_rate": args.learning_rate,
            "batch_size": args.batch_size,
            "max_steps": args.max_steps,
            "optimizer": args.optimizer,
            "min_count": args.min_count,
            "eval_every": args.eval_every,
            "seed": args.seed,
        },
    )
    _log_config("train-da", cfg)
    split = read_split_dir(args.data_dir, lex)
    pretrained = None
    if args.embeddings:
        pretrained = load_embeddings_text(args.embeddings, cfg.embed_dim)
        log.info("loaded %d pretrained vectors", len(pretrained))

    def on_step(entry):
        if entry.dev_macro_f1 is not None:
            log.info("step %d loss %.4f dev macro-F1 %.2f",
                     entry.step, entry.loss, entry.dev_macro_f1)

    result = train(
        split.train, lex.label_names, cfg,
        dev_examples=split.dev, pretrained=pretrained,
        threads=args.threads, on_step=on_step,
    )
    result.best.save(args.out)
    if result.best_dev_f1 is not None:
        log.info("saved best model (step %d, dev macro-F1 %.2f) to %s",
                 result.best_step, result.best_dev_f1, args.out)
    else:
        log.info("saved model to %s", args.out)
    if args.final_out:
        result.final.save(args.final_out)
        log.info("saved final-step model to %s", args.final_out)
    if args.report_dir:
        _write_history(args.report_dir, result.history)
        log.info("wrote training history and curve to %s", args.report_dir)


def cmd_train_wordpairs(args):
    lex = _load_lexicon(args.lexicon)
    cfg = resolve_config(
        wp.WpConfig,
        args.config,
        {
            "min_support": args.min_support,
            "include_arg1_singles": args.include_arg1_singles,
            "learning_rate": args.learning_rate,
            "l2": args.l2,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "seed": args.seed,
            "hashed": args.hashed,
            "hash_buckets": args.hash_buckets,
        },
    )
    _log_config("train-wordpairs", cfg)
    split = read_split_dir(args.data_dir, lex)
    if cfg.hashed:
        feat = wp.HashedFeaturizer(cfg.hash_buckets, cfg.include_arg1_singles)
        features = None
        num_features = cfg.hash_buckets
    else:
        feat = wp.FeatureDict.build(split.train, cfg.min_support, cfg.include_arg1_singles)
        features = feat.features
        num_features = len(feat)
        log.info("feature dictionary: %d features", num_features)
    vectors = [wp.featurize(e, feat) for e in split.train]
    y = [e.label_id for e in split.train]
    model = wp.train_ovr(vectors, y, lex.label_names, cfg, num_features, features)
    model.save(args.out)
    dev_vectors = [wp.featurize(e, feat) for e in split.dev]
    dev_y = np.array([e.label_id for e in split.dev])
    if len(dev_y):
        f1 = macro_f1_ids(model.predict_batch(dev_vectors), dev_y, lex.num_classes)
        log.info("dev macro-F1 %.2f", f1)
    log.info("saved model to %s", args.out)


def _write_eval_report(report_dir, report, extra=None):
    import os

    from . import figures

    os.makedirs(report_dir, exist_ok=True)
    write_report_json(os.path.join(report_dir, "report.json"), report, extra)
    write_confusion_csv(os.path.join(report_dir, "confusion.csv"), report)
    figures.save_confusion_heatmap(
        os.path.join(report_dir, "confusion.png"), report.confusion, report.labels
    )


def cmd_evaluate(args):
    if bool(args.model) == bool(args.predictions):
        raise CliError("exactly one of --model and --predictions is required")
    lex = _load_lexicon(args.lexicon)
    examples = read_examples_tsv(args.data, lex)
    gold = [lex.id_to_label(e.label_id) for e in examples]
    if args.model:
        kind, model = _load_any_model(args.model)
        preds = _predict_labels(kind, model, examples)
        pred_path = None
        if args.report_dir:
            import os

            os.makedirs(args.report_dir, exist_ok=True)
            pred_path = os.path.join(args.report_dir, "predictions.tsv")
            with open(pred_path, "w", encoding="utf-8") as fh:
                for i, label in enumerate(preds):
                    fh.write("%d\t%s\n" % (i, label))
    else:
        pred_map = read_predictions_tsv(args.predictions)
        ids = [str(i) for i in range(len(examples))]
        (preds,) = align_by_id(ids, pred_map)
    report = evaluate(preds, gold, lex.label_names)
    log.info("n %g accuracy %.2f macro-F1 %.2f", report.n, report.accuracy, report.macro_f1)
    if args.report_dir:
        _write_eval_report(args.report_dir, report)
        log.info("wrote report to %s", args.report_dir)
    print(json.dumps({"n": round(report.n, 6), "accuracy": round2(report.accuracy),
                      "macro_f1": round2(report.macro_f1)}))


def cmd_predict(args):
    kind, model = _load_any_model(args.model)
    a1 = tokenize(args.arg1).tokens
    a2 = tokenize(args.arg2).tokens
    if kind == "da":
        ranked = model.predict(a1, a2)
    else:
        feat = _wp_featurizer(model)
        ranked = model.predict(feat.featurize(a1, a2))
    if args.top:
        ranked = ranked[: args.top]
    print(json.dumps({"ranked": [[label, score] for label, score in ranked]}))


def cmd_explain(args):
    kind, model = _load_any_model(args.model)
    if kind != "da":
        raise CliError("explain requires an attention model checkpoint")
    a1 = tokenize(args.arg1).tokens
    a2 = tokenize(args.arg2).tokens
    out = model.explain(a1, a2)
    if args.figure:
        from . import figures

        figures.save_alignment_heatmap(
            args.figure, out["ab_weights"], out["arg1_tokens"], out["arg2_tokens"],
            title="predicted: %s" % out["predicted"],
        )
        log.info("wrote alignment figure to %s", args.figure)
    print(json.dumps(out, indent=2, sort_keys=True))


def cmd_rater_analysis(args):
    lex = _load_lexicon(args.lexicon)
    examples = read_examples_tsv(args.gold, lex)
    gold = [lex.id_to_label(e.label_id) for e in examples]
    ids = [str(i) for i in range(len(examples))]
    pred_map = read_predictions_tsv(args.predictions)
    rater_map = read_raters_tsv(args.raters)
    preds, annotations = align_by_id(ids, pred_map, rater_map)
    analysis = rater_analysis(gold, preds, annotations, lex.label_names)
    for setting in (analysis.a, analysis.b, analysis.c):
        log.info(
            "setting %s: n %d raters macro-F1 %.2f model macro-F1 %.2f",
            setting.setting, setting.n, setting.raters.macro_f1, setting.model.macro_f1,
        )
    log.info(
        "consensus: >=2 agree %.1f%%, unanimous %.1f%%",
        analysis.consensus.majority_pct, analysis.consensus.unanimous_pct,
    )
    if args.report_dir:
        import os

        from . import figures

        os.makedirs(args.report_dir, exist_ok=True)
        with open(os.path.join(args.report_dir, "rater_analysis.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(analysis.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_confusion_csv(
            os.path.join(args.report_dir, "confusion_raters.csv"), analysis.a.raters
        )
        write_confusion_csv(
            os.path.join(args.report_dir, "confusion_model.csv"), analysis.a.model
        )
        figures.save_rater_model_panel(
            os.path.join(args.report_dir, "raters_vs_model.png"),
            analysis.a.raters.confusion, analysis.a.model.confusion, lex.label_names,
        )
        log.info("wrote rater analysis to %s", args.report_dir)
    print(json.dumps(analysis.to_json_dict(), sort_keys=True))


def _add_lexicon_flag(p):
    p.add_argument("--lexicon", help="connective lexicon TSV (default: bundled)")


def build_parser():
    version = "connpred %s (formats: %s)" % (
        __version__,
        ", ".join("%s %s" % kv for kv in sorted(FORMAT_VERSIONS.items())),
    )
    parser = argparse.ArgumentParser(
        prog="connpred",
        description="Discourse connective prediction: corpus extraction, balanced "
        "splits, attention and word-pair classifiers, evaluation.",
    )
    parser.add_argument("--version", action="version", version=version)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="harvest labeled sentence pairs from a corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="JSON-lines corpus (id + paragraphs per record)")
    src.add_argument("--text", nargs="+", help="raw text files, one article each")
    p.add_argument("--out", required=True, help="output pairs TSV")
    p.add_argument("--threads", type=int, default=1)
    _add_lexicon_flag(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-dataset", help="balanced article-disjoint train/dev/test split")
    p.add_argument("--pairs", required=True, help="pairs TSV from extract")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="config file (JSON or key=value)")
    p.add_argument("--dev-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--seed", type=int)
    _add_lexicon_flag(p)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train-da", help="train the decomposable attention classifier")
    p.add_argument("--data-dir", required=True, help="split directory from build-dataset")
    p.add_argument("--out", required=True, help="output checkpoint (best dev snapshot)")
    p.add_argument("--final-out", help="also save the final-step parameters here")
    p.add_argument("--config", help="config file (JSON or key=value)")
    p.add_argument("--embeddings", help="pretrained embedding text file (token v1 v2 ...)")
    p.add_argument("--report-dir", help="write history.tsv and training_curve.png here")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--dropout-attend", type=float)
    p.add_argument("--dropout-compare", type=float)
    p.add_argument("--dropout-classify", type=float)
    p.add_argument("--layer-norm", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--min-count", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int)
    _add_lexicon_flag(p)
    p.set_defaults(func=cmd_train_da)

    p = sub.add_parser("train-wordpairs", help="train the sparse word-pair baseline")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="config file (JSON or key=value)")
    p.add_argument("--min-support", type=int)
    p.add_argument("--include-arg1-singles", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hashed", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--hash-buckets", type=int)
    _add_lexicon_flag(p)
    p.set_defaults(func=cmd_train_wordpairs)

    p = sub.add_parser("evaluate", help="score predictions against a labeled TSV")
    p.add_argument("--data", required=True, help="labeled examples TSV")
    p.add_argument("--model", help="model checkpoint to run")
    p.add_argument("--predictions", help="existing predictions TSV (item_id<TAB>label)")
    p.add_argument("--report-dir", help="write report.json, confusion.csv/png, predictions.tsv")
    _add_lexicon_flag(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="rank labels for one sentence pair")
    p.add_argument("--model", required=True)
    p.add_argument("--arg1", required=True)
    p.add_argument("--arg2", required=True)
    p.add_argument("--top", type=int, help="truncate the ranked list")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="soft alignment and scores for one pair")
    p.add_argument("--model", required=True)
    p.add_argument("--arg1", required=True)
    p.add_argument("--arg2", required=True)
    p.add_argument("--figure", help="write the alignment heatmap PNG here")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("rater-analysis", help="human-rater comparison (settings A/B/C)")
    p.add_argument("--gold", required=True, help="labeled test TSV")
    p.add_argument("--predictions", required=True, help="model predictions TSV")
    p.add_argument("--raters", required=True, help="rater annotations TSV (3 labels per item)")
    p.add_argument("--report-dir", help="write JSON, confusion CSVs, and the panel figure")
    _add_lexicon_flag(p)
    p.set_defaults(func=cmd_rater_analysis)

    return parser


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except _DATA_ERRORS as exc:
        sys.stderr.write(json.dumps({"error": str(exc), "type": type(exc).__name__}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
