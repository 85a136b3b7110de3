"""Command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime or numeric
error. Diagnostics go to stderr; data goes to files or stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import text
from .config import load_config
from .errors import IntegrityError, NumericError, ValidationError
from .evaluation import (LabeledSentence, evaluate_spans, format_report, load_spans, read_conll,
                         report_json, write_conll, write_standoff)
from .lm import LmCheckpoint, perplexity, train_lm
from .synthetic import SyntheticSpec, generate_synthetic
from .tagger import NerCheckpoint, ensemble_predict, predict, train_ner

log = logging.getLogger("clinconcept")
DOC_MARKER = "-DOC-"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _require(*paths):
    for p in paths:
        if not os.path.isfile(p):
            raise ValidationError(f"input file not found: {p}")


def _out_dir_ok(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ValidationError(f"output directory does not exist: {parent}")


def read_raw_documents(path):
    """Raw text; ``-DOC- id`` lines separate documents (optional)."""
    docs, ident, lines = [], os.path.basename(path), []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith(DOC_MARKER):
                if "".join(lines).strip():
                    docs.append(text.Document(ident, "".join(lines), "notes"))
                ident, lines = line[len(DOC_MARKER):].strip(), []
            else:
                lines.append(line)
    if "".join(lines).strip():
        docs.append(text.Document(ident, "".join(lines), "notes"))
    return docs


def _write_corpus(path, docs):
    with open(path, "w", encoding="utf-8") as fh:
        text.write_corpus(fh, [text.document_sentences(d) for d in docs])


def _flat_corpus(path):
    return [s for doc in text.read_corpus(path) for s in doc]


# ---------------------------------------------------------------- handlers

def cmd_build_wiki(a):
    _require(a.pages, a.terms)
    _out_dir_ok(a.out)
    docs = text.filter_wiki(text.read_pages(a.pages), text.read_terms(a.terms))
    _write_corpus(a.out, docs)
    log.info("kept %d page(s)", len(docs))


def cmd_normalize_notes(a):
    _require(a.inp)
    _out_dir_ok(a.out)
    with open(a.inp, encoding="utf-8") as fh:
        raw = fh.read()
    with open(a.out, "w", encoding="utf-8") as fh:
        fh.write(text.normalize_deid(raw))


def cmd_segment(a):
    _require(a.inp)
    _out_dir_ok(a.out)
    _write_corpus(a.out, read_raw_documents(a.inp))


def cmd_vocab(a):
    _require(a.inp)
    _out_dir_ok(a.out)
    vocab = text.build_vocab(_flat_corpus(a.inp), a.min_count)
    with open(a.out, "w", encoding="utf-8") as fh:
        text.write_vocab(fh, vocab)
    log.info("vocabulary of %d types", len(vocab))


def cmd_lm_train(a):
    _require(a.config, a.train, a.test)
    _out_dir_ok(a.out)
    cfg = load_config(a.config)
    lm = train_lm(_flat_corpus(a.train), _flat_corpus(a.test), cfg.lm, a.seed,
                  on_epoch=lambda rec: print(json.dumps(rec), flush=True))
    lm.save(a.out)
    log.info("LM checkpoint %s written to %s", lm.content_hash[:12], a.out)


def cmd_lm_perplexity(a):
    _require(a.checkpoint, a.corpus)
    report = perplexity(LmCheckpoint.load(a.checkpoint), _flat_corpus(a.corpus))
    print(json.dumps(report.as_dict(), sort_keys=True))


def cmd_ner_train(a):
    _require(a.config, a.lm, a.data)
    _out_dir_ok(a.out)
    cfg = load_config(a.config)
    lm = LmCheckpoint.load(a.lm)
    data = read_conll(a.data)
    for s in data:
        if s.tags is None:
            raise ValidationError(f"{a.data}: sentence {s.index} of {s.doc_id!r} has no tags")
    ner = train_ner([(s.tokens, s.tags) for s in data], lm, cfg.ner, a.seed,
                    on_epoch=lambda rec: print(json.dumps(rec), flush=True), lm_path=a.lm)
    ner.save(a.out)


def cmd_ner_predict(a):
    _require(a.lm, a.inp, *a.checkpoint)
    _out_dir_ok(a.out)
    lm = LmCheckpoint.load(a.lm)
    models = [NerCheckpoint.load(p) for p in a.checkpoint]
    for m, p in zip(models, a.checkpoint):
        if m.lm_hash != lm.content_hash:
            raise IntegrityError(f"{p} was trained on a different language model than {a.lm}")
    sentences = read_conll(a.inp)
    tokens = [s.tokens for s in sentences]
    tags = predict(models[0], lm, tokens) if len(models) == 1 else ensemble_predict(models, lm, tokens)
    with open(a.out, "w", encoding="utf-8") as fh:
        write_conll(fh, [LabeledSentence(s.doc_id, s.index, s.tokens, t)
                         for s, t in zip(sentences, tags)])


def cmd_ner_evaluate(a):
    _require(a.gold, a.pred)
    if a.json:
        _out_dir_ok(a.json)
    report = evaluate_spans(load_spans(a.gold), load_spans(a.pred))
    table, payload = format_report(report)
    sys.stdout.write(table)
    if a.json:
        with open(a.json, "w", encoding="utf-8") as fh:
            fh.write(report_json(payload))


def cmd_synth(a):
    _require(a.spec)
    spec = SyntheticSpec.load(a.spec)
    os.makedirs(a.out_dir, exist_ok=True)
    data = generate_synthetic(spec)
    with open(os.path.join(a.out_dir, "corpus.txt"), "w", encoding="utf-8") as fh:
        text.write_corpus(fh, data.documents)
    with open(os.path.join(a.out_dir, "tags.conll"), "w", encoding="utf-8") as fh:
        write_conll(fh, data.sentences)
    with open(os.path.join(a.out_dir, "gold_spans.tsv"), "w", encoding="utf-8") as fh:
        write_standoff(fh, data.spans)


# ---------------------------------------------------------------- parser

def build_parser():
    p = Parser(prog="clinconcept", description="Clinical concept extraction pipeline.")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    groups = p.add_subparsers(dest="group", required=True, parser_class=Parser)

    def command(group, name, fn, help_text):
        sp = group.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        return sp

    corpus = groups.add_parser("corpus", help="build and prepare text corpora")
    cs = corpus.add_subparsers(dest="command", required=True, parser_class=Parser)
    sp = command(cs, "build-wiki", cmd_build_wiki, "filter encyclopedia pages by a term list")
    sp.add_argument("--pages", required=True)
    sp.add_argument("--terms", required=True)
    sp.add_argument("--out", required=True)
    sp = command(cs, "normalize-notes", cmd_normalize_notes, "replace de-identification placeholders")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp = command(cs, "segment", cmd_segment, "sentence-split and tokenize raw text")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)

    vocab = groups.add_parser("vocab", help="vocabulary tools")
    vs = vocab.add_subparsers(dest="command", required=True, parser_class=Parser)
    sp = command(vs, "build", cmd_vocab, "count-thresholded vocabulary")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--min-count", type=int, default=5)
    sp.add_argument("--out", required=True)

    lm = groups.add_parser("lm", help="bidirectional language model")
    ls = lm.add_subparsers(dest="command", required=True, parser_class=Parser)
    sp = command(ls, "train", cmd_lm_train, "train an LM; epoch records go to stdout")
    for flag in ("--config", "--train", "--test", "--out"):
        sp.add_argument(flag, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp = command(ls, "perplexity", cmd_lm_perplexity, "held-out perplexity of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)

    ner = groups.add_parser("ner", help="concept tagger")
    ns = ner.add_subparsers(dest="command", required=True, parser_class=Parser)
    sp = command(ns, "train", cmd_ner_train, "train one tagger on top of a frozen LM")
    for flag in ("--config", "--lm", "--data", "--out"):
        sp.add_argument(flag, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp = command(ns, "predict", cmd_ner_predict, "tag sentences; several checkpoints vote")
    sp.add_argument("--lm", required=True)
    sp.add_argument("--checkpoint", action="append", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp = command(ns, "evaluate", cmd_ner_evaluate, "exact-span precision, recall and F1")
    sp.add_argument("--gold", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--json")

    synth = groups.add_parser("synth", help="synthetic annotated data")
    ss = synth.add_subparsers(dest="command", required=True, parser_class=Parser)
    sp = command(ss, "generate", cmd_synth, "write corpus, tags and gold spans")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out-dir", required=True)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())
