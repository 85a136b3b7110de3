"""BIO <-> span conversion, exact-span scoring and report formatting."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

from .crf import CLASSES, TAGSET, TagSet
from .errors import TagParseError, ValidationError

log = logging.getLogger(__name__)

DOC_MARKER = "-DOC-"


@dataclass(frozen=True, order=True)
class Span:
    doc_id: str
    sentence_index: int
    start_token: int
    end_token: int  # inclusive
    concept_class: str

    @property
    def key(self):
        return (self.doc_id, self.sentence_index)


def _split(tag, tagset):
    if tag not in tagset.tags:
        raise TagParseError(tag)
    if tag == "O":
        return "O", None
    return tag[0], tag[2:]


def bio_to_spans(tags, doc_id="", sentence_index=0, tagset: TagSet = TAGSET):
    """Maximal ``B-X I-X*`` runs as spans.

    An ``I-X`` with no open ``X`` span starts a new span, as in conlleval.

    >>> [(s.start_token, s.end_token, s.concept_class)
    ...  for s in bio_to_spans(["B-problem", "I-problem", "O", "B-test"])]
    [(0, 1, 'problem'), (3, 3, 'test')]
    """
    spans = []
    open_cls, open_start = None, None
    for i, tag in enumerate(tags):
        prefix, cls = _split(tag, tagset)
        if prefix == "I" and open_cls == cls:
            continue
        if open_cls is not None:
            spans.append(Span(doc_id, sentence_index, open_start, i - 1, open_cls))
            open_cls = None
        if prefix in ("B", "I"):
            open_cls, open_start = cls, i
    if open_cls is not None:
        spans.append(Span(doc_id, sentence_index, open_start, len(tags) - 1, open_cls))
    return spans


def spans_to_bio(spans, sentence_length, tagset: TagSet = TAGSET):
    tags = ["O"] * sentence_length
    for s in sorted(spans, key=lambda s: s.start_token):
        if s.concept_class not in tagset.classes:
            raise ValidationError(f"unknown concept class {s.concept_class!r}")
        if not 0 <= s.start_token <= s.end_token < sentence_length:
            raise ValidationError(f"span {s} out of bounds for length {sentence_length}")
        if any(t != "O" for t in tags[s.start_token:s.end_token + 1]):
            raise ValidationError(f"span {s} overlaps another span")
        tags[s.start_token] = f"B-{s.concept_class}"
        for i in range(s.start_token + 1, s.end_token + 1):
            tags[i] = f"I-{s.concept_class}"
    return tags


def repair_bio(tags, tagset: TagSet = TAGSET):
    """Rewrite every ``I-X`` lacking an open ``X`` span as ``B-X``."""
    out = list(tags)
    prev = "O"
    for i, tag in enumerate(out):
        prefix, cls = _split(tag, tagset)
        if prefix == "I" and (prev == "O" or prev[2:] != cls):
            out[i] = f"B-{cls}"
        prev = out[i]
    return out


def is_bio_valid(tags, tagset: TagSet = TAGSET):
    return repair_bio(tags, tagset) == list(tags)


@dataclass
class ClassCounts:
    true_positives: int = 0
    predicted_count: int = 0
    gold_count: int = 0

    def exact(self):
        """``(precision, recall, f1)`` as fractions; each is 0 when undefined."""
        tp = self.true_positives
        p = Fraction(tp, self.predicted_count) if self.predicted_count else Fraction(0)
        r = Fraction(tp, self.gold_count) if self.gold_count else Fraction(0)
        f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
        return p, r, f1

    @property
    def precision(self):
        return float(self.exact()[0])

    @property
    def recall(self):
        return float(self.exact()[1])

    @property
    def f1(self):
        return float(self.exact()[2])

    def as_dict(self):
        p, r, f1 = self.exact()
        return {"true_positives": self.true_positives, "predicted_count": self.predicted_count,
                "gold_count": self.gold_count, "precision": float(p), "recall": float(r),
                "f1": float(f1)}


@dataclass
class EvalReport:
    per_class: dict = field(default_factory=dict)

    @property
    def overall(self):
        total = ClassCounts()
        for c in self.per_class.values():
            total.true_positives += c.true_positives
            total.predicted_count += c.predicted_count
            total.gold_count += c.gold_count
        return total


def evaluate_spans(gold, predicted, classes=CLASSES):
    """Micro-averaged exact-span scores.

    A prediction is correct only when document, sentence, both boundaries
    and the class all equal a gold span.
    """
    gold, predicted = list(gold), list(predicted)
    for name, side in (("gold", gold), ("predicted", predicted)):
        dup = [s for s, n in Counter(side).items() if n > 1]
        if dup:
            raise ValidationError(f"duplicate {name} span {dup[0]}")
        for s in side:
            if s.concept_class not in classes:
                raise ValidationError(f"unknown concept class {s.concept_class!r} in {name} spans")
    report = EvalReport({c: ClassCounts() for c in classes})
    gold_set = set(gold)
    for s in gold:
        report.per_class[s.concept_class].gold_count += 1
    for s in predicted:
        counts = report.per_class[s.concept_class]
        counts.predicted_count += 1
        if s in gold_set:
            counts.true_positives += 1
    return report


def format_report(report: EvalReport, label="overall"):
    """Fixed-width percentage table plus a JSON-ready mirror with raw counts."""
    header = f"{'Class':<12}{'Precision':>10}{'Recall':>7}{'F1':>7}{'TP':>8}{'Pred':>8}{'Gold':>8}"
    lines = [header, "-" * len(header)]
    rows = list(report.per_class.items()) + [(label, report.overall)]
    for name, c in rows:
        if name == label:
            lines.append("-" * len(header))
        p, r, f1 = (100 * float(v) for v in c.exact())
        lines.append(f"{name:<12}{p:10.2f}{r:7.2f}{f1:7.2f}"
                     f"{c.true_positives:8d}{c.predicted_count:8d}{c.gold_count:8d}")
    payload = {"format_version": 1,
               "classes": {k: v.as_dict() for k, v in report.per_class.items()},
               label: report.overall.as_dict()}
    return "\n".join(lines) + "\n", payload


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

@dataclass
class LabeledSentence:
    doc_id: str
    index: int
    tokens: list
    tags: list | None = None

    def spans(self, tagset: TagSet = TAGSET):
        return bio_to_spans(self.tags, self.doc_id, self.index, tagset)


def read_conll(path, repair=True, tagset: TagSet = TAGSET):
    """Read ``token<TAB>tag`` lines; ``-DOC- id`` opens a document.

    The tag column may be absent on every line (unlabeled input). Tags are
    validated, and by default repaired with :func:`repair_bio`.
    """
    sentences = []
    doc_id, index = "", 0
    tokens, tags = [], []
    repaired = 0

    def flush():
        nonlocal tokens, tags, index, repaired
        if tokens:
            if len(tags) not in (0, len(tokens)):
                raise ValidationError(f"{path}: sentence {index} of {doc_id!r} mixes tagged and untagged lines")
            seq = tags or None
            if seq is not None and repair:
                fixed = repair_bio(seq, tagset)
                repaired += fixed != seq
                seq = fixed
            sentences.append(LabeledSentence(doc_id, index, tokens, seq))
            index += 1
        tokens, tags = [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            if line.startswith(DOC_MARKER):
                flush()
                doc_id, index = line[len(DOC_MARKER):].strip(), 0
                continue
            parts = line.split("\t")
            if len(parts) > 2:
                raise ValidationError(f"{path}:{lineno}: expected token<TAB>tag, got {line!r}")
            tokens.append(parts[0])
            if len(parts) == 2:
                if parts[1] not in tagset.tags:
                    raise TagParseError(parts[1], lineno)
                tags.append(parts[1])
    flush()
    if repaired:
        log.warning("%s: repaired %d sentence(s) with I- tags lacking an open span", path, repaired)
    return sentences


def write_conll(fh, sentences):
    doc = None
    for s in sentences:
        if s.doc_id != doc:
            fh.write(f"{DOC_MARKER} {s.doc_id}\n\n")
            doc = s.doc_id
        for i, tok in enumerate(s.tokens):
            fh.write(f"{tok}\t{s.tags[i]}\n" if s.tags is not None else f"{tok}\n")
        fh.write("\n")


def read_standoff(path, classes=CLASSES):
    spans = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValidationError(f"{path}:{lineno}: expected 5 tab-separated fields")
            try:
                s = Span(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-integer span offsets") from None
            if s.concept_class not in classes:
                raise ValidationError(f"{path}:{lineno}: unknown concept class {s.concept_class!r}")
            if s.start_token > s.end_token or s.start_token < 0:
                raise ValidationError(f"{path}:{lineno}: bad span boundaries")
            spans.append(s)
    return spans


def write_standoff(fh, spans):
    for s in spans:
        fh.write(f"{s.doc_id}\t{s.sentence_index}\t{s.start_token}\t{s.end_token}\t{s.concept_class}\n")


def looks_like_standoff(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                parts = line.rstrip("\n").split("\t")
                return len(parts) == 5 and all(p.lstrip("-").isdigit() for p in parts[1:4])
    return False


def load_spans(path):
    """Spans from either a standoff file or a CoNLL tag file."""
    if looks_like_standoff(path):
        return read_standoff(path)
    spans = []
    for s in read_conll(path):
        if s.tags is None:
            raise ValidationError(f"{path}: sentence {s.index} of {s.doc_id!r} has no tags")
        spans.extend(s.spans())
    return spans


def report_json(payload):
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
