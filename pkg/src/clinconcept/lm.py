"""Character-aware bidirectional language model (ELMo-style).

Tokens are encoded by a character CNN, a highway stack and a projection.
Each direction then runs its own stack of LSTM layers, each followed by a
projection back to ``projection_dim`` and a highway layer. The two
directions share the token encoder and the output softmax but never see each
other's states, so the forward model at position ``k`` depends only on
tokens ``<= k``.

The downstream layer stack for a sentence is a ``[3, T, 2 * projection_dim]``
array: the duplicated token layer ``[x, x]`` followed by one
``[forward, backward]`` layer per LSTM layer.
"""
from __future__ import annotations

import functools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import checkpoint as ckpt
from .errors import ValidationError
from .numerics import (AdamState, adam_step, affine, affine_backward, clip_by_global_norm,
                       conv_backward, conv_forward, highway_backward, highway_forward,
                       init_affine, init_conv_filters, init_highway, init_lstm,
                       lstm_backward, lstm_forward, softmax_cross_entropy, spawn_rngs)
from .text import BOS, EOS, Vocabulary, build_vocab

log = logging.getLogger(__name__)

# bytes 0-255, then sentinels
BOW, EOW, BOS_CHAR, EOS_CHAR, PAD_CHAR = 256, 257, 258, 259, 260
NUM_CHARS = 261
DIRECTIONS = ("fwd", "bwd")
PRECISIONS = {"single": np.float32, "double": np.float64}


@dataclass
class LmConfig:
    char_embed_dim: int = 16
    filter_widths: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7])
    filter_counts: list = field(default_factory=lambda: [32, 32, 64, 128, 256, 512, 2014])
    highway_layers: int = 2
    projection_dim: int = 512
    lstm_hidden: int = 4096
    lstm_layers: int = 2
    vocab_min_count: int = 5
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.001
    grad_clip: float | None = 10.0
    max_token_chars: int = 50
    activation: str = "tanh"
    precision: str = "single"

    def validate(self):
        if len(self.filter_widths) != len(self.filter_counts) or not self.filter_widths:
            raise ValidationError("lm.filter_widths and lm.filter_counts must have the same, non-zero length")
        for name in ("char_embed_dim", "projection_dim", "lstm_hidden", "vocab_min_count",
                     "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"lm.{name} must be positive")
        if any(w < 1 for w in self.filter_widths) or any(c < 1 for c in self.filter_counts):
            raise ValidationError("lm filter widths and counts must be positive")
        if self.lstm_layers != 2:
            raise ValidationError("lm.lstm_layers must be 2 (downstream layer stacks assume three layers)")
        if self.highway_layers < 0:
            raise ValidationError("lm.highway_layers must be non-negative")
        if self.learning_rate <= 0:
            raise ValidationError("lm.learning_rate must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("lm.grad_clip must be positive or null")
        if self.max_token_chars < 3:
            raise ValidationError("lm.max_token_chars must be at least 3")
        if self.activation not in ("tanh", "relu"):
            raise ValidationError("lm.activation must be 'tanh' or 'relu'")
        if self.precision not in PRECISIONS:
            raise ValidationError("lm.precision must be 'single' or 'double'")
        return self

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown lm config key(s): {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class PerplexityReport:
    token_count: int
    forward_nll: float
    backward_nll: float

    @property
    def perplexity(self):
        return math.exp((self.forward_nll + self.backward_nll) / (2 * self.token_count))

    def as_dict(self):
        return {"token_count": self.token_count, "forward_nll": self.forward_nll,
                "backward_nll": self.backward_nll, "perplexity": self.perplexity}


@dataclass
class LmCheckpoint:
    config: LmConfig
    vocab: Vocabulary
    params: dict
    format_version: int = ckpt.FORMAT_VERSION

    def to_json(self):
        return ckpt.dumps("lm", self.config.to_dict(), self.params, vocab=self.vocab.id_to_token,
                          vocab_min_count=self.vocab.min_count)

    @classmethod
    def from_json(cls, text):
        doc = ckpt.loads(text, "lm")
        config = LmConfig.from_dict(doc["config"])
        vocab = Vocabulary(list(doc["vocab"]), doc.get("vocab_min_count", config.vocab_min_count))
        params = doc["arrays"]
        expected = param_shapes(config, len(vocab))
        if {k: v.shape for k, v in params.items()} != expected:
            raise ValidationError("checkpoint arrays do not match the shapes implied by its config")
        return cls(config, vocab, params)

    @functools.cached_property
    def content_hash(self):
        return ckpt.sha256_hex(self.to_json())

    def save(self, path):
        ckpt.write_text(path, self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(ckpt.read_text(path))


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def param_shapes(config: LmConfig, vocab_size):
    e, P, H = config.char_embed_dim, config.projection_dim, config.lstm_hidden
    conv_dim = sum(config.filter_counts)
    shapes = {"char_embed": (NUM_CHARS, e)}
    for i, (w, m) in enumerate(zip(config.filter_widths, config.filter_counts)):
        shapes[f"conv.{i}.W"] = (w * e, m)
        shapes[f"conv.{i}.b"] = (m,)
    for j in range(config.highway_layers):
        for k, s in (("W_h", (conv_dim, conv_dim)), ("b_h", (conv_dim,)),
                     ("W_t", (conv_dim, conv_dim)), ("b_t", (conv_dim,))):
            shapes[f"char_hw.{j}.{k}"] = s
    shapes["char_proj.W"] = (conv_dim, P)
    shapes["char_proj.b"] = (P,)
    for d in DIRECTIONS:
        for l in range(config.lstm_layers):
            p = f"{d}.{l}"
            shapes[f"{p}.lstm.W"] = (P, 4 * H)
            shapes[f"{p}.lstm.U"] = (H, 4 * H)
            shapes[f"{p}.lstm.b"] = (4 * H,)
            shapes[f"{p}.proj.W"] = (H, P)
            shapes[f"{p}.proj.b"] = (P,)
            for k, s in (("W_h", (P, P)), ("b_h", (P,)), ("W_t", (P, P)), ("b_t", (P,))):
                shapes[f"{p}.hw.{k}"] = s
    shapes["softmax.W"] = (P, vocab_size)
    shapes["softmax.b"] = (vocab_size,)
    return shapes


def _put(params, prefix, sub):
    for k, v in sub.items():
        params[f"{prefix}.{k}"] = v


def sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def init_params(config: LmConfig, vocab_size, rng):
    dt = config.dtype
    e, P, H = config.char_embed_dim, config.projection_dim, config.lstm_hidden
    conv_dim = sum(config.filter_counts)
    params = {}
    table = rng.normal(0.0, 1.0, (NUM_CHARS, e)).astype(dt)
    table[PAD_CHAR] = 0.0
    params["char_embed"] = table
    for i, bank in enumerate(init_conv_filters(rng, e, config.filter_widths, config.filter_counts, dt)):
        _put(params, f"conv.{i}", bank)
    for j in range(config.highway_layers):
        _put(params, f"char_hw.{j}", init_highway(rng, conv_dim, dtype=dt))
    _put(params, "char_proj", init_affine(rng, conv_dim, P, dt))
    for d in DIRECTIONS:
        for l in range(config.lstm_layers):
            _put(params, f"{d}.{l}.lstm", init_lstm(rng, P, H, dt))
            _put(params, f"{d}.{l}.proj", init_affine(rng, H, P, dt))
            _put(params, f"{d}.{l}.hw", init_highway(rng, P, dtype=dt))
    _put(params, "softmax", init_affine(rng, P, vocab_size, dt))
    return params


# --------------------------------------------------------------------------
# character encoding
# --------------------------------------------------------------------------

@functools.lru_cache(maxsize=200_000)
def token_char_ids(token, max_chars):
    if token == BOS:
        body = [BOS_CHAR]
    elif token == EOS:
        body = [EOS_CHAR]
    else:
        body = list(token.encode("utf-8"))[:max_chars - 2]
    if not body:
        raise ValidationError("tokens must contain at least one character")
    return (BOW, *body, EOW)


def char_matrix(tokens, max_chars):
    """``[T, Lc]`` padded character ids and per-token lengths."""
    ids = [token_char_ids(t, max_chars) for t in tokens]
    lengths = np.array([len(c) for c in ids], dtype=np.int64)
    width = int(lengths.max()) if len(ids) else 1
    out = np.full((len(ids), width), PAD_CHAR, dtype=np.int64)
    for i, c in enumerate(ids):
        out[i, :len(c)] = c
    return out, lengths


def _token_encoder_forward(params, config, char_ids, char_len):
    mask = (char_ids != PAD_CHAR)[..., None]
    emb = params["char_embed"][char_ids] * mask
    filters = [sub(params, f"conv.{i}") for i in range(len(config.filter_widths))]
    h, conv_cache = conv_forward(emb, filters, char_len, config.activation)
    hw_caches = []
    for j in range(config.highway_layers):
        h, c = highway_forward(h, sub(params, f"char_hw.{j}"))
        hw_caches.append(c)
    x = affine(h, params["char_proj.W"], params["char_proj.b"])
    return x, (char_ids, mask, conv_cache, hw_caches, h)


def _token_encoder_backward(dx, params, config, cache, grads):
    char_ids, mask, conv_cache, hw_caches, h = cache
    dh, dW, db = affine_backward(dx, h, params["char_proj.W"])
    grads["char_proj.W"], grads["char_proj.b"] = dW, db
    for j in range(config.highway_layers - 1, -1, -1):
        dh, g = highway_backward(dh, hw_caches[j])
        _put(grads, f"char_hw.{j}", g)
    demb, conv_grads = conv_backward(dh, conv_cache)
    for i, g in enumerate(conv_grads):
        _put(grads, f"conv.{i}", g)
    demb = demb * mask
    table = np.zeros_like(params["char_embed"])
    np.add.at(table, char_ids.reshape(-1), demb.reshape(-1, demb.shape[-1]))
    grads["char_embed"] = table


def embed_tokens_chars(tokens, params, config: LmConfig):
    """Context-independent ``[T, projection_dim]`` token representations."""
    if len(tokens) == 0:
        return np.zeros((0, config.projection_dim), dtype=params["char_proj.W"].dtype)
    ids, lengths = char_matrix(tokens, config.max_token_chars)
    return _token_encoder_forward(params, config, ids, lengths)[0]


# --------------------------------------------------------------------------
# batched forward / backward
# --------------------------------------------------------------------------

@dataclass
class Batch:
    char_ids: np.ndarray   # [B, S, Lc], S = longest sentence + 2 boundary tokens
    char_len: np.ndarray   # [B, S]
    token_ids: np.ndarray  # [B, S]
    lengths: np.ndarray    # [B] including boundaries


def make_batch(sentences, vocab: Vocabulary | None, max_chars):
    seqs = [[BOS, *s, EOS] for s in sentences]
    B = len(seqs)
    S = max(len(s) for s in seqs)
    per = [token_char_ids(t, max_chars) for s in seqs for t in s]
    Lc = max(len(c) for c in per)
    char_ids = np.full((B, S, Lc), PAD_CHAR, dtype=np.int64)
    char_len = np.ones((B, S), dtype=np.int64)
    token_ids = np.zeros((B, S), dtype=np.int64)
    k = 0
    for b, s in enumerate(seqs):
        for t, tok in enumerate(s):
            c = per[k]
            k += 1
            char_ids[b, t, :len(c)] = c
            char_len[b, t] = len(c)
            if vocab is not None:
                token_ids[b, t] = vocab.lookup(tok)
    return Batch(char_ids, char_len, token_ids, np.array([len(s) for s in seqs]))


def _direction_forward(params, config, x, lengths, d):
    direction = "forward" if d == "fwd" else "backward"
    outs, caches = [], []
    h = x
    for l in range(config.lstm_layers):
        p = f"{d}.{l}"
        hs, c_lstm = lstm_forward(h, sub(params, f"{p}.lstm"), direction, lengths)
        z = affine(hs, params[f"{p}.proj.W"], params[f"{p}.proj.b"])
        y, c_hw = highway_forward(z, sub(params, f"{p}.hw"))
        caches.append((c_lstm, hs, c_hw))
        outs.append(y)
        h = y
    return outs, caches


def _direction_backward(d_top, params, config, caches, d, grads):
    dh = d_top
    for l in range(config.lstm_layers - 1, -1, -1):
        p = f"{d}.{l}"
        c_lstm, hs, c_hw = caches[l]
        dz, g = highway_backward(dh, c_hw)
        _put(grads, f"{p}.hw", g)
        dhs, dW, db = affine_backward(dz, hs, params[f"{p}.proj.W"])
        grads[f"{p}.proj.W"], grads[f"{p}.proj.b"] = dW, db
        dh, g, _, _ = lstm_backward(dhs, c_lstm)
        _put(grads, f"{p}.lstm", g)
    return dh


def _encode_batch(params, config, batch: Batch):
    B, S, Lc = batch.char_ids.shape
    x, enc_cache = _token_encoder_forward(params, config, batch.char_ids.reshape(B * S, Lc),
                                          batch.char_len.reshape(-1))
    x = x.reshape(B, S, -1)
    outs, caches = {}, {}
    for d in DIRECTIONS:
        outs[d], caches[d] = _direction_forward(params, config, x, batch.lengths, d)
    return x, outs, (enc_cache, caches)


def _targets(batch: Batch):
    B, S = batch.token_ids.shape
    t = np.arange(S)[None, :]
    L = batch.lengths[:, None]
    ids = batch.token_ids
    tgt_f = np.concatenate([ids[:, 1:], np.zeros((B, 1), ids.dtype)], axis=1)
    tgt_b = np.concatenate([np.zeros((B, 1), ids.dtype), ids[:, :-1]], axis=1)
    return tgt_f, t < L - 1, tgt_b, (t >= 1) & (t < L)


def batch_loss(params, config: LmConfig, batch: Batch, scale=1.0):
    """Forward + backward next-token NLL of a batch, times ``scale``, with gradients.

    Returns ``(loss, grads, (forward_nll, backward_nll, predictions_per_direction))``.
    """
    x, outs, (enc_cache, caches) = _encode_batch(params, config, batch)
    tgt_f, w_f, tgt_b, w_b = _targets(batch)
    W, b = params["softmax.W"], params["softmax.b"]
    grads = {"softmax.W": np.zeros_like(W), "softmax.b": np.zeros_like(b)}
    nll, dx = {}, np.zeros_like(x)
    for d, tgt, w in (("fwd", tgt_f, w_f), ("bwd", tgt_b, w_b)):
        top = outs[d][-1]
        loss_d, dlogits = softmax_cross_entropy(affine(top, W, b), tgt, w)
        nll[d] = loss_d
        dtop, dW, db = affine_backward(dlogits * scale, top, W)
        grads["softmax.W"] += dW
        grads["softmax.b"] += db
        dx += _direction_backward(dtop, params, config, caches[d], d, grads)
    B, S, _ = x.shape
    _token_encoder_backward(dx.reshape(B * S, -1), params, config, enc_cache, grads)
    count = int(w_f.sum())
    return scale * (nll["fwd"] + nll["bwd"]), grads, (float(nll["fwd"]), float(nll["bwd"]), count)


def batch_nll(params, config: LmConfig, batch: Batch):
    """Forward-only evaluation: ``(forward_nll, backward_nll, predictions_per_direction)``."""
    _, outs, _ = _encode_batch(params, config, batch)
    tgt_f, w_f, tgt_b, w_b = _targets(batch)
    W, b = params["softmax.W"], params["softmax.b"]
    res = []
    for d, tgt, w in (("fwd", tgt_f, w_f), ("bwd", tgt_b, w_b)):
        logits = affine(outs[d][-1], W, b).astype(np.float64)
        res.append(float(softmax_cross_entropy(logits, tgt, w)[0]))
    return res[0], res[1], int(w_f.sum())


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------

def layer_stacks(checkpoint: LmCheckpoint, sentences, batch_size=64):
    """Layer stacks (``[3, T, 2P]`` each) for many sentences, in input order."""
    config, params = checkpoint.config, checkpoint.params
    out = [None] * len(sentences)
    order = sorted(range(len(sentences)), key=lambda i: len(sentences[i]))
    for start in range(0, len(order), batch_size):
        idx = [i for i in order[start:start + batch_size]]
        nonempty = [i for i in idx if len(sentences[i])]
        for i in idx:
            if not len(sentences[i]):
                out[i] = np.zeros((3, 0, 2 * config.projection_dim), dtype=config.dtype)
        if not nonempty:
            continue
        batch = make_batch([sentences[i] for i in nonempty], None, config.max_token_chars)
        x, outs, _ = _encode_batch(params, config, batch)
        for row, i in enumerate(nonempty):
            T = len(sentences[i])
            sl = slice(1, T + 1)
            layers = [np.concatenate([x[row, sl], x[row, sl]], axis=-1)]
            for l in range(config.lstm_layers):
                layers.append(np.concatenate([outs["fwd"][l][row, sl], outs["bwd"][l][row, sl]], axis=-1))
            out[i] = np.stack(layers)
    return out


def bilm_forward(tokens, checkpoint: LmCheckpoint):
    """The ``[3, T, 2 * projection_dim]`` layer stack for one sentence."""
    return layer_stacks(checkpoint, [list(tokens)])[0]


def perplexity(checkpoint: LmCheckpoint, corpus, batch_size=64):
    sentences = [s for s in corpus if len(s)]
    if not sentences:
        raise ValidationError("perplexity needs a non-empty corpus")
    config = checkpoint.config
    fwd = bwd = 0.0
    count = 0
    order = sorted(range(len(sentences)), key=lambda i: len(sentences[i]))
    for start in range(0, len(order), batch_size):
        batch = make_batch([sentences[i] for i in order[start:start + batch_size]],
                           checkpoint.vocab, config.max_token_chars)
        f, b, n = batch_nll(checkpoint.params, config, batch)
        fwd += f
        bwd += b
        count += n
    return PerplexityReport(count, fwd, bwd)


def length_batches(lengths, batch_size, rng, pool=20):
    """Shuffle, group similar lengths inside pools of ``pool`` batches, shuffle batch order."""
    perm = rng.permutation(len(lengths))
    lengths = np.asarray(lengths)
    batches = []
    span = batch_size * pool
    for start in range(0, len(perm), span):
        chunk = perm[start:start + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches += [chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train_lm(train_corpus, test_corpus, config: LmConfig, seed: int, on_epoch=None):
    """Train a bidirectional LM with Adam on the summed forward/backward cross-entropy.

    ``on_epoch`` receives one record per epoch, starting with the untrained
    model as epoch 0.
    """
    config.validate()
    train = [list(s) for s in train_corpus if len(s)]
    test = [list(s) for s in test_corpus if len(s)]
    if not train:
        raise ValidationError("train_lm needs a non-empty training corpus")
    vocab = build_vocab(train, config.vocab_min_count)
    init_rng, shuffle_rng = spawn_rngs(seed, 2)
    params = init_params(config, len(vocab), init_rng)
    state = AdamState.for_params(params, learning_rate=config.learning_rate)

    def report(epoch, train_loss, started):
        ppl = perplexity(LmCheckpoint(config, vocab, params), test).perplexity if test else None
        rec = {"epoch": epoch, "train_loss": train_loss, "test_perplexity": ppl,
               "wall_seconds": round(time.perf_counter() - started, 3)}
        log.info("lm epoch %d: train_loss=%s test_perplexity=%s", epoch, train_loss, ppl)
        if on_epoch is not None:
            on_epoch(rec)

    report(0, None, time.perf_counter())
    lengths = [len(s) for s in train]
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        total, count = 0.0, 0
        for idx in length_batches(lengths, config.batch_size, shuffle_rng):
            batch = make_batch([train[i] for i in idx], vocab, config.max_token_chars)
            n_pred = int((batch.lengths - 1).sum())
            loss, grads, (f, b, _) = batch_loss(params, config, batch, scale=1.0 / (2 * n_pred))
            grads = clip_by_global_norm(grads, config.grad_clip)
            params, state = adam_step(params, grads, state)
            total += f + b
            count += 2 * n_pred
        report(epoch, total / count, started)
    return LmCheckpoint(config, vocab, params)
