"""Templated clinical-style sentences with gold concept annotations.

The generator stands in for access-restricted annotated notes. Templates are
space-separated token strings whose ``{problem}``, ``{treatment}``, ``{test}``
slots draw a (possibly multi-word) lexicon entry, and whose ``{filler}`` slots
draw a generic word.
"""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .crf import CLASSES
from .errors import ValidationError
from .evaluation import LabeledSentence, bio_to_spans

SENTENCES_PER_DOC = 25

PROBLEMS = [
    "chest pain", "shortness of breath", "hypertension", "diabetes mellitus", "pneumonia",
    "atrial fibrillation", "acute renal failure", "fever", "cough", "nausea", "headache",
    "anemia", "sepsis", "congestive heart failure", "urinary tract infection", "hypotension",
    "abdominal pain", "edema", "a small pleural effusion", "hyperkalemia", "delirium", "rash",
]
TREATMENTS = [
    "aspirin", "metoprolol", "lisinopril", "insulin", "heparin", "vancomycin", "ceftriaxone",
    "furosemide", "iv fluids", "packed red blood cells", "a cardiac catheterization",
    "coumadin", "morphine", "albuterol nebulizers", "prednisone", "levofloxacin",
    "physical therapy", "an appendectomy", "nitroglycerin", "potassium chloride",
]
TESTS = [
    "a chest x-ray", "an ekg", "a ct scan of the head", "blood cultures", "a urinalysis",
    "an echocardiogram", "the cbc", "a lumbar puncture", "an mri", "serum creatinine",
    "troponin", "the white count", "a stress test", "arterial blood gas", "the inr",
    "a liver biopsy", "an ultrasound", "the chem panel", "lactate", "a colonoscopy",
]

TEMPLATES = [
    "the patient presented with {problem} and was started on {treatment} .",
    "{test} showed {problem} .",
    "she was given {treatment} for {problem} .",
    "he denies {problem} .",
    "{test} was obtained and was {filler} .",
    "{treatment} was continued {filler} .",
    "on admission {test} revealed {problem} {filler} .",
    "history of {problem} , treated with {treatment} .",
    "we will check {test} and start {treatment} .",
    "the {filler} {filler} was {filler} .",
    "no evidence of {problem} on {test} .",
    "her {problem} improved after {treatment} .",
    "{filler} {filler} {filler} {filler} .",
    "repeat {test} in the morning .",
    "discharged home on {treatment} with follow up {filler} .",
    "complains of {problem} since {filler} .",
]

FILLERS = [
    "today", "yesterday", "stable", "normal", "unremarkable", "negative", "positive", "mild",
    "moderate", "severe", "chronic", "acute", "daily", "nightly", "week", "month", "clinic",
    "service", "family", "nurse", "team", "plan", "note", "bed", "floor", "unit", "room",
    "morning", "evening", "pending", "reviewed", "discussed", "noted", "given", "tolerated",
    "well", "poorly", "again", "later", "soon", "baseline", "overnight", "briefly", "per",
    "protocol", "schedule", "dose", "level", "result", "report", "findings", "status",
    "condition", "exam", "visit", "history", "course", "interval", "trend", "change",
]
_SYLLABLES = ["ba", "do", "ki", "lu", "me", "no", "pa", "ri", "so", "tu", "ve", "zo"]
_SLOT = re.compile(r"^\{(\w+)\}$")


def _filler_words(n):
    words = list(FILLERS[:n])
    for a, b, c in itertools.product(_SYLLABLES, repeat=3):
        if len(words) >= n:
            break
        words.append(a + b + c)
    if len(words) < n:
        raise ValidationError(f"vocabulary_size {n} is larger than the generator supports")
    return words


@dataclass
class SyntheticSpec:
    vocabulary_size: int = 60  # number of distinct filler words
    lexicons: dict = field(default_factory=lambda: {
        "problem": list(PROBLEMS), "treatment": list(TREATMENTS), "test": list(TESTS)})
    templates: list = field(default_factory=lambda: list(TEMPLATES))
    sentence_count: int = 2000
    seed: int = 0

    def validate(self):
        if self.vocabulary_size < 1 or self.sentence_count < 1 or self.seed < 0:
            raise ValidationError("vocabulary_size and sentence_count must be positive, seed non-negative")
        if not self.templates:
            raise ValidationError("synthetic spec needs at least one template")
        for cls, entries in self.lexicons.items():
            if cls not in CLASSES:
                raise ValidationError(f"unknown concept class {cls!r} in lexicons")
            if not entries or any(not e.split() for e in entries):
                raise ValidationError(f"lexicon for {cls!r} is empty or has blank entries")
        for t in self.templates:
            for tok in t.split():
                m = _SLOT.match(tok)
                if m and m.group(1) != "filler" and m.group(1) not in self.lexicons:
                    raise ValidationError(f"template slot {tok} has no lexicon: {t!r}")
        return self

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown synthetic spec key(s): {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except FileNotFoundError:
            raise ValidationError(f"synthetic spec not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticData:
    sentences: list  # LabeledSentence
    spans: list

    @property
    def documents(self):
        docs = {}
        for s in self.sentences:
            docs.setdefault(s.doc_id, []).append(s.tokens)
        return list(docs.values())


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    fillers = _filler_words(spec.vocabulary_size)
    lexicons = {c: [e.split() for e in spec.lexicons[c]] for c in CLASSES if c in spec.lexicons}
    templates = [t.split() for t in spec.templates]
    sentences, spans = [], []
    for n in range(spec.sentence_count):
        tokens, tags = [], []
        for piece in templates[rng.integers(len(templates))]:
            m = _SLOT.match(piece)
            if m is None:
                tokens.append(piece)
                tags.append("O")
            elif m.group(1) == "filler":
                tokens.append(fillers[rng.integers(len(fillers))])
                tags.append("O")
            else:
                cls = m.group(1)
                entry = lexicons[cls][rng.integers(len(lexicons[cls]))]
                tokens += entry
                tags += [f"B-{cls}"] + [f"I-{cls}"] * (len(entry) - 1)
        doc_id = f"synth-{n // SENTENCES_PER_DOC:04d}"
        index = n % SENTENCES_PER_DOC
        sentences.append(LabeledSentence(doc_id, index, tokens, tags))
        spans += bio_to_spans(tags, doc_id, index)
    return SyntheticData(sentences, spans)
