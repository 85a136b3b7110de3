"""BiLSTM-CRF concept tagger on top of a frozen language model.

Per sentence: the LM layer stack is collapsed by a learnable scalar mix
(``gamma * sum_i softmax(s)_i * h_i``), passed through a stack of
bidirectional LSTM layers, projected to tag scores and decoded by a
BIO-constrained CRF. Only the mix, encoder, projection and CRF parameters
are trained; the LM never changes.
"""
from __future__ import annotations

import functools
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import checkpoint as ckpt
from . import crf
from .errors import IntegrityError, ValidationError
from .evaluation import repair_bio
from .lm import LmCheckpoint, layer_stacks, length_batches, sub
from .numerics import (AdamState, adam_step, affine, affine_backward, clip_by_global_norm,
                       dropout, init_affine, init_lstm, lstm_backward, lstm_forward, softmax,
                       spawn_rngs)

log = logging.getLogger(__name__)

PRECISIONS = {"single": np.float32, "double": np.float64}


@dataclass
class NerConfig:
    encoder_layers: int = 2
    encoder_hidden: int = 256  # per direction
    dropout_rate: float = 0.5
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 200
    seeds: list = field(default_factory=lambda: list(range(10)))
    grad_clip: float | None = None
    precision: str = "single"

    def validate(self):
        for name in ("encoder_layers", "encoder_hidden", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValidationError(f"ner.{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("ner.dropout_rate must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValidationError("ner.learning_rate must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("ner.grad_clip must be positive or null")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ValidationError("ner.seeds must be a non-empty list of non-negative integers")
        if self.precision not in PRECISIONS:
            raise ValidationError("ner.precision must be 'single' or 'double'")
        return self

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown ner config key(s): {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class ScalarMixParams:
    s_logits: np.ndarray
    gamma: float = 1.0

    @property
    def weights(self):
        return softmax(np.asarray(self.s_logits, dtype=np.float64))


@dataclass
class NerCheckpoint:
    config: NerConfig
    params: dict
    lm_hash: str
    seed: int
    lm_path: str | None = None
    format_version: int = ckpt.FORMAT_VERSION

    def to_json(self):
        extra = {"lm_hash": self.lm_hash, "seed": self.seed}
        if self.lm_path is not None:
            extra["lm_path"] = self.lm_path
        return ckpt.dumps("ner", self.config.to_dict(), self.params, **extra)

    @classmethod
    def from_json(cls, text):
        doc = ckpt.loads(text, "ner")
        for key in ("lm_hash", "seed"):
            if key not in doc:
                raise ValidationError(f"NER checkpoint lacks {key!r}")
        return cls(NerConfig.from_dict(doc["config"]), doc["arrays"], doc["lm_hash"],
                   int(doc["seed"]), doc.get("lm_path"))

    @functools.cached_property
    def content_hash(self):
        return ckpt.sha256_hex(self.to_json())

    def save(self, path):
        ckpt.write_text(path, self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(ckpt.read_text(path))

    @property
    def mix(self):
        return ScalarMixParams(self.params["mix.s_logits"], float(self.params["mix.gamma"]))


# --------------------------------------------------------------------------
# scalar mix
# --------------------------------------------------------------------------

def scalar_mix_forward(stack, s_logits, gamma):
    """Mix ``stack`` (``[..., 3, T, D]``) down to ``[..., T, D]``."""
    stack = np.asarray(stack)
    if stack.ndim < 3 or stack.shape[-3] != 3:
        raise ValidationError(f"scalar mix needs exactly 3 layers, got stack of shape {stack.shape}")
    w = softmax(s_logits)
    mixed = np.einsum("l,...ltd->...td", w, stack)
    return gamma * mixed, (stack, w, gamma, mixed)


def scalar_mix_backward(dy, cache):
    """Returns ``(d_stack, d_s_logits, d_gamma)``."""
    stack, w, gamma, mixed = cache
    d_gamma = (dy * mixed).sum()
    d_mixed = gamma * dy
    d_w = (np.moveaxis(stack, -3, 0) * d_mixed).reshape(3, -1).sum(axis=1)
    d_logits = w * (d_w - (w * d_w).sum())
    d_stack = np.einsum("l,...td->...ltd", w, d_mixed)
    return d_stack, d_logits, d_gamma


def scalar_mix(stack, params: ScalarMixParams):
    logits = np.asarray(params.s_logits, dtype=np.result_type(stack, np.float32))
    return scalar_mix_forward(stack, logits, logits.dtype.type(params.gamma))[0]


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

def init_params(config: NerConfig, input_dim, rng, num_tags=len(crf.TAGSET)):
    dt = config.dtype
    H = config.encoder_hidden
    params = {"mix.s_logits": np.zeros(3, dt), "mix.gamma": np.array(1.0, dt)}
    d = input_dim
    for l in range(config.encoder_layers):
        for direction in ("fwd", "bwd"):
            for k, v in init_lstm(rng, d, H, dt).items():
                params[f"enc.{l}.{direction}.{k}"] = v
        d = 2 * H
    for k, v in init_affine(rng, d, num_tags, dt).items():
        params[f"emit.{k}"] = v
    params["crf.transitions"] = np.zeros((num_tags, num_tags), dt)
    params["crf.start_scores"] = np.zeros(num_tags, dt)
    params["crf.end_scores"] = np.zeros(num_tags, dt)
    return params


def crf_params(params, tagset=crf.TAGSET):
    allowed, start, end = crf.transition_mask(tagset)
    return crf.CrfParams(params["crf.transitions"], params["crf.start_scores"],
                         params["crf.end_scores"], allowed, start, end)


def pad_stacks(stacks, dtype):
    """``[B, 3, T_max, D]`` zero-padded array and lengths."""
    lengths = np.array([s.shape[1] for s in stacks])
    B, T, D = len(stacks), int(lengths.max()), stacks[0].shape[2]
    out = np.zeros((B, 3, T, D), dtype)
    for b, s in enumerate(stacks):
        out[b, :, :s.shape[1]] = s
    return out, lengths


def forward(params, config: NerConfig, stacks, lengths, mode="eval", rng=None):
    """Emission scores ``[B, T, tags]`` for padded layer stacks, plus a backward cache."""
    rate = config.dropout_rate
    y, mix_cache = scalar_mix_forward(stacks, params["mix.s_logits"], params["mix.gamma"])
    h, mask = dropout(y, rate, rng, mode, return_mask=True)
    layer_caches = []
    for l in range(config.encoder_layers):
        f, cf = lstm_forward(h, sub(params, f"enc.{l}.fwd"), "forward", lengths)
        b, cb = lstm_forward(h, sub(params, f"enc.{l}.bwd"), "backward", lengths)
        out, m = dropout(np.concatenate([f, b], axis=-1), rate, rng, mode, return_mask=True)
        layer_caches.append((cf, cb, m))
        h = out
    em = affine(h, params["emit.W"], params["emit.b"])
    return em, (mix_cache, mask, layer_caches, h)


def backward(d_em, params, config: NerConfig, cache):
    mix_cache, mask, layer_caches, h = cache
    grads = {}
    dh, grads["emit.W"], grads["emit.b"] = affine_backward(d_em, h, params["emit.W"])
    H = config.encoder_hidden
    for l in range(config.encoder_layers - 1, -1, -1):
        cf, cb, m = layer_caches[l]
        dh = dh * m
        dxf, gf, _, _ = lstm_backward(dh[..., :H], cf)
        dxb, gb, _, _ = lstm_backward(dh[..., H:], cb)
        for k in gf:
            grads[f"enc.{l}.fwd.{k}"] = gf[k]
            grads[f"enc.{l}.bwd.{k}"] = gb[k]
        dh = dxf + dxb
    _, grads["mix.s_logits"], grads["mix.gamma"] = scalar_mix_backward(dh * mask, mix_cache)
    return grads


def batch_loss(params, config: NerConfig, stacks, lengths, gold, mode="train", rng=None, scale=1.0):
    """CRF negative log-likelihood of a padded batch (times ``scale``) and all gradients."""
    em, cache = forward(params, config, stacks, lengths, mode, rng)
    cp = crf_params(params)
    loss, d_em, crf_grads = crf.batch_nll(em, lengths, gold, cp)
    grads = backward(d_em * scale, params, config, cache)
    for k, v in crf_grads.items():
        grads[f"crf.{k}"] = v * scale
    return loss * scale, grads


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------

def _check_compatible(ner: NerCheckpoint, lm: LmCheckpoint):
    if ner.lm_hash != lm.content_hash:
        raise IntegrityError(
            f"NER checkpoint was trained on LM {ner.lm_hash[:12]}..., "
            f"but the supplied LM is {lm.content_hash[:12]}...")


def encode(tokens, lm: LmCheckpoint, ner: NerCheckpoint, mode="eval", rng=None):
    """Emission scores ``[T, 7]`` for one sentence."""
    _check_compatible(ner, lm)
    tokens = list(tokens)
    if not tokens:
        return np.zeros((0, len(crf.TAGSET)), ner.config.dtype)
    stack = layer_stacks(lm, [tokens])[0].astype(ner.config.dtype)
    em, _ = forward(ner.params, ner.config, stack[None], np.array([len(tokens)]), mode, rng)
    return em[0]


def _emissions(ner, lm, sentences, batch_size=64):
    out = [None] * len(sentences)
    nonempty = [i for i, s in enumerate(sentences) if len(s)]
    stacks = layer_stacks(lm, [sentences[i] for i in nonempty])
    order = sorted(range(len(nonempty)), key=lambda j: stacks[j].shape[1])
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        padded, lengths = pad_stacks([stacks[j] for j in chunk], ner.config.dtype)
        em, _ = forward(ner.params, ner.config, padded, lengths, "eval")
        for row, j in enumerate(chunk):
            out[nonempty[j]] = em[row, :lengths[row]]
    return out


def predict(ner: NerCheckpoint, lm: LmCheckpoint, sentences):
    """BIO tag strings for each sentence via constrained Viterbi."""
    _check_compatible(ner, lm)
    sentences = [list(s) for s in sentences]
    cp = crf_params(ner.params)
    tags = []
    for em in _emissions(ner, lm, sentences):
        if em is None:
            tags.append([])
        else:
            path, _ = crf.viterbi_decode(em, cp)
            tags.append(crf.TAGSET.decode(path))
    return tags


def vote(predictions, tagset=crf.TAGSET):
    """Per-token modal tag over models; ties go to the earlier tag in ``tagset``.

    ``predictions`` holds one list of tag sequences per model. Voted sequences
    are repaired to BIO validity.
    """
    order = {t: i for i, t in enumerate(tagset.tags)}
    out = []
    for per_model in zip(*predictions):
        lengths = {len(p) for p in per_model}
        if len(lengths) != 1:
            raise ValidationError("ensemble members disagree on sentence length")
        voted = []
        for column in zip(*per_model):
            counts = Counter(column)
            voted.append(min(counts, key=lambda t: (-counts[t], order[t])))
        out.append(repair_bio(voted, tagset))
    return out


def ensemble_predict(checkpoints, lm: LmCheckpoint, sentences):
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValidationError("ensemble needs at least one checkpoint")
    if len({c.lm_hash for c in checkpoints}) > 1:
        raise ValidationError("ensemble members reference different language models")
    sentences = [list(s) for s in sentences]
    return vote([predict(c, lm, sentences) for c in checkpoints])


def train_ner(train_data, lm: LmCheckpoint, config: NerConfig, seed: int, on_epoch=None, lm_path=None):
    """Fit mix, encoder, projection and CRF by Adam on the CRF likelihood.

    ``train_data`` is a sequence of ``(tokens, tags)`` pairs with BIO tag
    strings. The LM parameters are only read.
    """
    config.validate()
    data = [(list(toks), list(tags)) for toks, tags in train_data]
    if not data:
        raise ValidationError("train_ner needs at least one training sentence")
    allowed, start, end = crf.transition_mask(crf.TAGSET)
    masks = crf.CrfParams(np.zeros_like(allowed, float), start * 0.0, end * 0.0, allowed, start, end)
    gold = []
    for i, (toks, tags) in enumerate(data):
        if not toks or len(toks) != len(tags):
            raise ValidationError(f"training sentence {i} is empty or its tags do not align")
        try:
            ids = crf.TAGSET.encode(tags)
        except ValidationError as exc:
            raise ValidationError(f"training sentence {i}: {exc}") from None
        if not masks.is_valid(ids):
            raise ValidationError(f"training sentence {i} has BIO-invalid tags: {' '.join(tags)}")
        gold.append(np.array(ids))

    dt = config.dtype
    stacks = [s.astype(dt) for s in layer_stacks(lm, [t for t, _ in data])]
    init_rng, shuffle_rng, dropout_rng = spawn_rngs(seed, 3)
    params = init_params(config, stacks[0].shape[2], init_rng)
    state = AdamState.for_params(params, learning_rate=config.learning_rate)
    lengths_all = [s.shape[1] for s in stacks]
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        total = 0.0
        for idx in length_batches(lengths_all, config.batch_size, shuffle_rng):
            padded, lengths = pad_stacks([stacks[i] for i in idx], dt)
            g = np.zeros(padded.shape[0:1] + padded.shape[2:3], dtype=np.int64)
            for row, i in enumerate(idx):
                g[row, :lengths[row]] = gold[i]
            loss, grads = batch_loss(params, config, padded, lengths, g, "train", dropout_rng,
                                     scale=1.0 / len(idx))
            grads = {k: v.astype(dt) for k, v in clip_by_global_norm(grads, config.grad_clip).items()}
            params, state = adam_step(params, grads, state)
            total += float(loss) * len(idx)
        rec = {"epoch": epoch, "train_loss": total / len(data),
               "wall_seconds": round(time.perf_counter() - started, 3)}
        log.info("ner epoch %d: train_loss=%.4f", epoch, rec["train_loss"])
        if on_epoch is not None:
            on_epoch(rec)
    return NerCheckpoint(config, params, lm.content_hash, seed, lm_path)
