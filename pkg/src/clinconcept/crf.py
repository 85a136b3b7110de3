"""Linear-chain CRF over BIO tags.

Forbidden transitions score ``MASK_SCORE`` in scoring, the partition function
and training, which keeps all arithmetic finite. Decoding is restricted to
permitted transitions outright, so decoded paths are always valid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .numerics import logsumexp

MASK_SCORE = -1e4
CLASSES = ("problem", "treatment", "test")


@dataclass(frozen=True)
class TagSet:
    classes: tuple = CLASSES

    @property
    def tags(self):
        out = ["O"]
        for c in self.classes:
            out += [f"B-{c}", f"I-{c}"]
        return tuple(out)

    def __len__(self):
        return 2 * len(self.classes) + 1

    def index(self, tag):
        try:
            return self.tags.index(tag)
        except ValueError:
            raise ValidationError(f"tag {tag!r} is not in the tag set") from None

    def encode(self, tags):
        return [self.index(t) for t in tags]

    def decode(self, ids):
        names = self.tags
        return [names[i] for i in ids]


TAGSET = TagSet()


def transition_mask(tagset: TagSet = TAGSET):
    """BIO validity as ``(allowed[prev, next], start_allowed, end_allowed)``.

    ``I-X`` may only follow ``B-X`` or ``I-X`` and may not open a sentence.
    """
    tags = tagset.tags
    n = len(tags)
    allowed = np.zeros((n, n), dtype=bool)
    for i, prev in enumerate(tags):
        for j, nxt in enumerate(tags):
            if nxt.startswith("I-"):
                allowed[i, j] = prev != "O" and prev[2:] == nxt[2:]
            else:
                allowed[i, j] = True
    start = np.array([not t.startswith("I-") for t in tags])
    end = np.ones(n, dtype=bool)
    return allowed, start, end


@dataclass
class CrfParams:
    transitions: np.ndarray
    start_scores: np.ndarray
    end_scores: np.ndarray
    constraint_mask: np.ndarray
    start_mask: np.ndarray
    end_mask: np.ndarray

    @property
    def num_tags(self):
        return self.transitions.shape[0]

    @classmethod
    def zeros(cls, num_tags, dtype=np.float64):
        """Unconstrained parameters with every score zero."""
        return cls(np.zeros((num_tags, num_tags), dtype), np.zeros(num_tags, dtype),
                   np.zeros(num_tags, dtype), np.ones((num_tags, num_tags), bool),
                   np.ones(num_tags, bool), np.ones(num_tags, bool))

    @classmethod
    def for_tagset(cls, tagset: TagSet = TAGSET, dtype=np.float64):
        allowed, start, end = transition_mask(tagset)
        n = len(tagset)
        return cls(np.zeros((n, n), dtype), np.zeros(n, dtype), np.zeros(n, dtype),
                   allowed, start, end)

    def effective(self):
        """Transition/start/end scores with forbidden entries replaced by ``MASK_SCORE``."""
        dt = self.transitions.dtype
        fill = dt.type(MASK_SCORE)
        return (np.where(self.constraint_mask, self.transitions, fill),
                np.where(self.start_mask, self.start_scores, fill),
                np.where(self.end_mask, self.end_scores, fill))

    def is_valid(self, tags):
        if len(tags) == 0:
            return True
        if not self.start_mask[tags[0]] or not self.end_mask[tags[-1]]:
            return False
        return all(self.constraint_mask[a, b] for a, b in zip(tags[:-1], tags[1:]))


def _check_emissions(emissions, params):
    em = np.asarray(emissions)
    if em.ndim != 2 or em.shape[1] != params.num_tags:
        raise DimensionError(
            f"crf: emissions have shape {em.shape} but there are {params.num_tags} tags")
    if em.shape[0] < 1:
        raise ValidationError("crf: sequence must contain at least one token")
    return em


def score_path(emissions, params: CrfParams, tags):
    em = _check_emissions(emissions, params)
    tags = list(tags)
    if len(tags) != em.shape[0]:
        raise ValidationError(f"crf: {len(tags)} tags for {em.shape[0]} tokens")
    if any(not 0 <= y < params.num_tags for y in tags):
        raise ValidationError(f"crf: tag index out of range in {tags}")
    trans, start, end = params.effective()
    idx = np.asarray(tags)
    score = start[idx[0]] + em[np.arange(len(idx)), idx].sum() + end[idx[-1]]
    if len(idx) > 1:
        score += trans[idx[:-1], idx[1:]].sum()
    return float(score)


def _forward_backward(em, lengths, trans, start, end):
    """Log-space alpha/beta tables for a padded batch ``em`` of shape ``[B, T, K]``."""
    B, T, K = em.shape
    valid = np.arange(T)[None, :] < lengths[:, None]
    alpha = np.empty_like(em)
    a = start[None, :] + em[:, 0]
    alpha[:, 0] = a
    for t in range(1, T):
        nxt = logsumexp(a[:, :, None] + trans[None], axis=1) + em[:, t]
        a = np.where(valid[:, t, None], nxt, a)
        alpha[:, t] = a
    log_z = logsumexp(a + end[None, :], axis=1)
    beta = np.empty_like(em)
    b = np.broadcast_to(end, (B, K)).copy()
    beta[:, T - 1] = b
    for t in range(T - 2, -1, -1):
        nxt = logsumexp(trans[None] + (em[:, t + 1] + b)[:, None, :], axis=2)
        b = np.where(valid[:, t + 1, None], nxt, end[None, :])
        beta[:, t] = b
    return alpha, beta, log_z, valid


def log_partition(emissions, params: CrfParams):
    em = _check_emissions(emissions, params)
    trans, start, end = params.effective()
    _, _, log_z, _ = _forward_backward(em[None], np.array([em.shape[0]]), trans, start, end)
    return float(log_z[0])


def batch_nll(emissions, lengths, gold, params: CrfParams):
    """Summed negative log-likelihood of a padded batch and its gradients.

    ``emissions`` is ``[B, T, K]``, ``gold`` is ``[B, T]`` (padding ignored).
    Gradients are expected counts minus gold counts. Returns
    ``(loss, d_emissions, {"transitions", "start_scores", "end_scores"})``.
    """
    em = np.asarray(emissions)
    lengths = np.asarray(lengths)
    gold = np.asarray(gold)
    B, T, K = em.shape
    trans, start, end = params.effective()
    alpha, beta, log_z, valid = _forward_backward(em, lengths, trans, start, end)
    rows = np.arange(B)
    last = lengths - 1

    marg = np.exp(alpha + beta - log_z[:, None, None]) * valid[:, :, None]
    pair_valid = valid[:, 1:]
    pair = np.exp(alpha[:, :-1, :, None] + trans[None, None]
                  + (em[:, 1:] + beta[:, 1:])[:, :, None, :]
                  - log_z[:, None, None, None]) * pair_valid[:, :, None, None]

    gold_onehot = np.zeros_like(em)
    tt, bb = np.nonzero(valid.T)
    gold_onehot[bb, tt, gold[bb, tt]] = 1.0
    first_gold = gold[:, 0]
    last_gold = gold[rows, last]

    gold_score = (start[first_gold] + end[last_gold]
                  + (em * gold_onehot).sum(axis=(1, 2)))
    d_trans = pair.sum(axis=(0, 1))
    if T > 1:
        prev_g, next_g = gold[:, :-1], gold[:, 1:]
        gold_score = gold_score + (trans[prev_g, next_g] * pair_valid).sum(axis=1)
        np.add.at(d_trans, (prev_g[pair_valid], next_g[pair_valid]), -1.0)
    loss = (log_z - gold_score).sum()

    d_em = marg - gold_onehot
    d_start = marg[:, 0].sum(axis=0)
    np.add.at(d_start, first_gold, -1.0)
    d_end = marg[rows, last].sum(axis=0)
    np.add.at(d_end, last_gold, -1.0)
    grads = {"transitions": d_trans * params.constraint_mask,
             "start_scores": d_start * params.start_mask,
             "end_scores": d_end * params.end_mask}
    return loss, d_em, grads


def nll_and_gradients(emissions, params: CrfParams, gold):
    """``log_partition - score_path(gold)`` with gradients for one sentence.

    Returns ``(loss, grads)`` where ``grads`` has keys ``emissions``,
    ``transitions``, ``start_scores`` and ``end_scores``.
    """
    em = _check_emissions(emissions, params)
    gold = list(gold)
    if len(gold) != em.shape[0]:
        raise ValidationError(f"crf: {len(gold)} gold tags for {em.shape[0]} tokens")
    if any(not 0 <= y < params.num_tags for y in gold):
        raise ValidationError(f"crf: tag index out of range in {gold}")
    if not params.is_valid(gold):
        raise ValidationError(f"crf: gold path {gold} violates the transition constraints")
    loss, d_em, grads = batch_nll(em[None], np.array([len(gold)]), np.array([gold]), params)
    grads["emissions"] = d_em[0]
    return loss[()], grads


def viterbi_decode(emissions, params: CrfParams):
    """Best path over permitted transitions and its ``score_path`` score.

    Ties go to the lower tag index at every backtracking step.
    """
    em = _check_emissions(emissions, params)
    trans = np.where(params.constraint_mask, params.transitions, -np.inf)
    start = np.where(params.start_mask, params.start_scores, -np.inf)
    end = np.where(params.end_mask, params.end_scores, -np.inf)
    tags = _viterbi(em, trans, start, end)
    if tags is None:
        # no permitted path at all; fall back to soft constraints
        tags = _viterbi(em, *params.effective())
    return tags, score_path(em, params, tags)


def _viterbi(em, trans, start, end):
    T = em.shape[0]
    delta = start + em[0]
    back = np.zeros((T, em.shape[1]), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + trans
        back[t] = cand.argmax(axis=0)
        delta = cand.max(axis=0) + em[t]
    final = delta + end
    if not np.isfinite(final.max()):
        return None
    y = int(final.argmax())
    path = [y]
    for t in range(T - 1, 0, -1):
        y = int(back[t, y])
        path.append(y)
    return path[::-1]
