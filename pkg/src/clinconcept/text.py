"""Corpus construction: segmentation, tokenization, de-id normalization,
ontology-filtered Wikipedia extraction, vocabularies and statistics."""
from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ValidationError

log = logging.getLogger(__name__)

BOS, EOS, UNK = "<S>", "</S>", "<UNK>"
SPECIALS = (BOS, EOS, UNK)

ABBREVIATIONS = frozenset({"dr.", "mr.", "mrs.", "ms.", "pt.", "e.g.", "i.e.", "etc.", "vs.", "fig."})
EXCLUDED_SECTIONS = frozenset({"see also", "references", "further reading", "external links"})


@dataclass
class Document:
    id: str
    text: str
    source: str = "synthetic"  # wiki | clinical_note | synthetic


@dataclass(frozen=True)
class Token:
    text: str
    char_start: int
    char_end: int


@dataclass
class Sentence:
    doc_id: str
    index: int
    tokens: list


@dataclass
class WikiPage:
    title: str
    sections: list = field(default_factory=list)  # [(heading, body), ...]


# --------------------------------------------------------------------------
# sentence segmentation
# --------------------------------------------------------------------------

_PARAGRAPH_BREAK = re.compile(r"\n[ \t\r\f\v]*\n")
_HEADER = re.compile(r"[ \t]*([A-Z][^:\n]*):(?=\s|$)")
_TERMINATOR = re.compile(r"[.?!](?=\s+[A-Z0-9])")


def _break_points(text, start, end):
    cuts = set()
    pos = start
    for line in text[start:end].split("\n"):
        m = _HEADER.match(line)
        if m and len(m.group(1).split()) <= 5:
            cuts.add(pos + m.end())
        pos += len(line) + 1
    for m in _TERMINATOR.finditer(text, start, end):
        word_start = max(text.rfind(c, start, m.start()) for c in " \t\n") + 1
        word = text[max(word_start, start):m.end()].lower()
        if word not in ABBREVIATIONS:
            cuts.add(m.end())
    return sorted(cuts)


def segment_sentences(text):
    """Split ``text`` into ``(sentence, (start, end))`` pairs.

    Blank lines always separate sentences. A line-initial capitalised label of
    at most five words ending in a colon becomes its own sentence, and
    ``.?!`` followed by whitespace and an uppercase letter or digit ends one
    unless the word it closes is a known abbreviation.

    >>> [s for s, _ in segment_sentences("HISTORY: Pt. has HTN. He denies pain.")]
    ['HISTORY:', 'Pt. has HTN.', 'He denies pain.']
    """
    out = []
    bounds = [0]
    for m in _PARAGRAPH_BREAK.finditer(text):
        bounds += [m.start(), m.end()]
    bounds.append(len(text))
    for p_start, p_end in zip(bounds[::2], bounds[1::2]):
        cuts = [p_start] + _break_points(text, p_start, p_end) + [p_end]
        for a, b in zip(cuts[:-1], cuts[1:]):
            seg = text[a:b]
            stripped = seg.strip()
            if stripped:
                s = a + (len(seg) - len(seg.lstrip()))
                out.append((stripped, (s, s + len(stripped))))
    return out


# --------------------------------------------------------------------------
# tokenization
# --------------------------------------------------------------------------

_TOKEN = re.compile(r"""
      \d+(?:[.,/:]\d+)+             # 3.5  120/80  1,000  10:30
    | (?:[A-Za-z]\.){2,}            # e.g.  i.e.  U.S.
    | \w+(?=n't\b)                  # do|n't
    | n't\b
    | '(?:s|re|ve|ll|d|m)\b         # clitics
    | \w+(?:-\w+)*                  # words, hyphenated compounds
    | \.\.\.
    | \S
""", re.VERBOSE | re.IGNORECASE)


def tokenize(sentence):
    """Rule-based Treebank-style tokenizer returning :class:`Token` objects.

    >>> [t.text for t in tokenize("BP 120/80 at 3.5 mg")]
    ['BP', '120/80', 'at', '3.5', 'mg']
    """
    toks = [Token(m.group(), m.start(), m.end()) for m in _TOKEN.finditer(sentence)]
    merged = []
    for i, tok in enumerate(toks):
        prev = merged[-1] if merged else None
        if (tok.text == "." and prev is not None and prev.char_end == tok.char_start
                and i < len(toks) - 1 and (prev.text + ".").lower() in ABBREVIATIONS):
            merged[-1] = Token(prev.text + ".", prev.char_start, tok.char_end)
        else:
            merged.append(tok)
    return merged


# --------------------------------------------------------------------------
# de-identification placeholders
# --------------------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\[\*\*(.*?)\*\*\]", re.DOTALL)
_DATE_VALUE = re.compile(r"^\s*\d{1,4}(?:[-/]\d{1,4}){1,2}\s*$")

# order matters: "Hospital Ward Name" is a location, not a person
_CATEGORIES = (
    (("hospital", "location", "address", "street", "state", "country", "city",
      "university", "college", "ward", "clinic", "company"), "General Hospital"),
    (("name",), "John Doe"),
    (("date", "month", "year", "holiday", "day"), "2010-01-01"),
    (("number", "phone", "age", "identifier", "record", "ssn", "pager", "fax",
      "zip", "mrn", "unit", "serial", "account", "numeric"), "0"),
)


def _replace_placeholder(inner):
    low = inner.lower()
    if _DATE_VALUE.match(inner):
        return "2010-01-01"
    if low.strip().isdigit():
        return "0"
    for keys, value in _CATEGORIES:
        if any(k in low for k in keys):
            return value
    return inner.strip()


def normalize_deid(text):
    """Replace ``[** ... **]`` surrogates with natural-looking stand-ins.

    >>> normalize_deid("[**Hospital**] on [**2145-3-2**]")
    'General Hospital on 2010-01-01'
    """
    out = _PLACEHOLDER.sub(lambda m: _replace_placeholder(m.group(1)), text)
    if "[**" in out:
        log.warning("unterminated de-identification placeholder left unchanged")
    return out


# --------------------------------------------------------------------------
# Wikipedia filtering
# --------------------------------------------------------------------------

def normalize_title(s):
    return " ".join(s.split()).casefold()


def filter_wiki(pages, terms):
    """Keep pages whose title equals an ontology term, minus boilerplate sections.

    A term matching more than one distinct page is ambiguous and all of its
    pages are dropped.
    """
    terms = list(terms)
    if not terms:
        raise ValidationError("filter_wiki needs at least one term")
    wanted = {normalize_title(t) for t in terms if t.strip()}
    matches = {}
    for page in pages:
        key = normalize_title(page.title)
        if key in wanted:
            ident = (page.title, tuple(tuple(s) for s in page.sections))
            matches.setdefault(key, {}).setdefault(ident, page)
    docs = []
    for key in sorted(matches, key=lambda k: min(p.title for p in matches[k].values())):
        found = list(matches[key].values())
        if len(found) > 1:
            log.info("excluding ambiguous term %r (%d pages)", key, len(found))
            continue
        page = found[0]
        bodies = [body for heading, body in page.sections
                  if normalize_title(heading) not in EXCLUDED_SECTIONS and body.strip()]
        docs.append(Document(page.title, "\n\n".join(bodies), "wiki"))
    return docs


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------

@dataclass
class Vocabulary:
    id_to_token: list
    min_count: int = 1
    token_to_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:3]) != SPECIALS:
            raise ValidationError(f"vocabulary must start with {SPECIALS}")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValidationError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    @property
    def unk_id(self):
        return 2

    def lookup(self, token):
        return self.token_to_id.get(token, self.unk_id)


def build_vocab(corpus, min_count=5):
    """Specials, then tokens seen at least ``min_count`` times (by count, then text)."""
    if min_count < 1:
        raise ValidationError("min_count must be at least 1")
    counts = Counter(tok for sent in corpus for tok in sent if tok not in SPECIALS)
    kept = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, min_count)


# --------------------------------------------------------------------------
# splitting and statistics
# --------------------------------------------------------------------------

def split_corpus(sentences, train_fraction, rng):
    """Random disjoint partition; each side keeps the input order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie strictly between 0 and 1")
    sentences = list(sentences)
    n = len(sentences)
    n_train = int(math.floor(train_fraction * n + 0.5))
    perm = rng.permutation(n)
    in_train = set(perm[:n_train].tolist())
    train = [s for i, s in enumerate(sentences) if i in in_train]
    test = [s for i, s in enumerate(sentences) if i not in in_train]
    return train, test


@dataclass
class CorpusStats:
    documents: int
    sentences: int
    tokens: int
    average_sentence_length: Fraction

    def as_dict(self):
        return {"documents": self.documents, "sentences": self.sentences, "tokens": self.tokens,
                "average_sentence_length": round(float(self.average_sentence_length), 2)}


def corpus_stats(documents):
    """Counts over documents given as lists of token lists."""
    docs = list(documents)
    n_sent = sum(len(d) for d in docs)
    n_tok = sum(len(s) for d in docs for s in d)
    avg = Fraction(n_tok, n_sent) if n_sent else Fraction(0)
    return CorpusStats(len(docs), n_sent, n_tok, avg)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def read_pages(path):
    pages = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                title = obj["title"]
                sections = [(str(h), str(b)) for h, b in obj.get("sections", [])]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed page record ({exc})") from None
            if not str(title).strip():
                raise ValidationError(f"{path}:{lineno}: empty page title")
            pages.append(WikiPage(str(title), sections))
    return pages


def read_terms(path):
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def read_corpus(path):
    """Sentence corpus file -> list of documents, each a list of token lists."""
    docs, current = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                if current:
                    docs.append(current)
                current = []
            else:
                current.append(line.split(" "))
    if current:
        docs.append(current)
    return docs


def write_corpus(fh, documents):
    for i, doc in enumerate(documents):
        if i:
            fh.write("\n")
        for sent in doc:
            fh.write(" ".join(sent) + "\n")


def document_sentences(doc: Document):
    """Segment and tokenize one document into token-text lists."""
    return [[t.text for t in tokenize(s)] for s, _ in segment_sentences(doc.text)]


def read_vocab(path):
    with open(path, encoding="utf-8") as fh:
        return Vocabulary([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def write_vocab(fh, vocab: Vocabulary):
    for tok in vocab.id_to_token:
        fh.write(tok + "\n")
