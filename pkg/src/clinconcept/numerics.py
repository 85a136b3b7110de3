"""Numpy building blocks with hand-written backward passes.

Every layer comes as a ``*_forward`` function returning ``(out, cache)`` and
a matching ``*_backward`` function taking the upstream gradient and that
cache. Layers are dtype-agnostic: they compute in the dtype of their inputs,
so training runs in float32 while gradient checks run the same code in
float64.

Parameters are plain ``dict[str, np.ndarray]`` mappings; gradients use the
same keys.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

RNG_ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    """The only source of randomness in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams derived deterministically from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


def sigmoid(x):
    # tanh form never overflows, unlike 1 / (1 + exp(-x))
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activation(name):
    if name == "tanh":
        return np.tanh, lambda y: 1.0 - y * y
    if name == "relu":
        return (lambda z: np.maximum(z, 0)), (lambda y: (y > 0).astype(y.dtype))
    raise ValidationError(f"unknown activation {name!r}")


# --------------------------------------------------------------------------
# affine
# --------------------------------------------------------------------------

def affine(x, W, b):
    """``x @ W + b`` over the last axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"affine: x has shape {tuple(x.shape)} but W has shape "
            f"{tuple(W.shape)} and b has shape {tuple(b.shape)}")
    return x @ W + b


def affine_backward(dout, x, W):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ W.T, x2.T @ d2, d2.sum(axis=0)


def init_affine(rng, d_in, d_out, dtype=np.float32):
    limit = np.sqrt(1.0 / d_in)
    return {"W": rng.uniform(-limit, limit, (d_in, d_out)).astype(dtype),
            "b": np.zeros(d_out, dtype=dtype)}


# --------------------------------------------------------------------------
# softmax family
# --------------------------------------------------------------------------

def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def logsumexp(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax_cross_entropy(logits, targets, weights=None):
    """Summed negative log-likelihood of integer ``targets``.

    ``logits`` is ``[..., V]`` and ``targets`` has the leading shape. Optional
    ``weights`` (same shape as ``targets``) scale each position; a weight of
    zero masks the position out entirely. Returns ``(loss, dlogits)``.
    """
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = np.asarray(targets).reshape(-1)
    w = (np.ones(tgt.shape, dtype=logits.dtype) if weights is None
         else np.asarray(weights, dtype=logits.dtype).reshape(-1))
    logp = log_softmax(flat)
    rows = np.arange(tgt.shape[0])
    loss = -(logp[rows, tgt] * w).sum()
    grad = np.exp(logp)
    grad[rows, tgt] -= 1.0
    grad *= w[:, None]
    return loss, grad.reshape(logits.shape)


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------

def init_lstm(rng, d_in, hidden, dtype=np.float32):
    """Gate layout along the last axis is ``[input, forget, output, candidate]``."""
    limit = np.sqrt(1.0 / hidden)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return {"W": rng.uniform(-limit, limit, (d_in, 4 * hidden)).astype(dtype),
            "U": rng.uniform(-limit, limit, (hidden, 4 * hidden)).astype(dtype),
            "b": b.astype(dtype)}


def _reverse_index(T, lengths):
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def _take_time(x, idx):
    return np.take_along_axis(x, idx[:, :, None], axis=1)


def lstm_forward(x, params, direction="forward", lengths=None, h0=None, c0=None):
    """Run an LSTM over a batch ``x`` of shape ``[B, T, d]``.

    The backward direction reverses each row within its own length, runs the
    recurrence, and restores input order, so right padding never leaks into
    valid positions.
    """
    if direction not in ("forward", "backward"):
        raise ValidationError(f"unknown LSTM direction {direction!r}")
    W, U, bias = params["W"], params["U"], params["b"]
    B, T, d = x.shape
    H = U.shape[0]
    if W.shape != (d, 4 * H) or U.shape != (H, 4 * H) or bias.shape != (4 * H,):
        raise DimensionError(
            f"lstm: input has shape {tuple(x.shape)} but W has shape "
            f"{tuple(W.shape)} and U has shape {tuple(U.shape)}")
    if lengths is None:
        lengths = np.full(B, T)
    rev = _reverse_index(T, lengths) if direction == "backward" else None
    xs = _take_time(x, rev) if rev is not None else x

    dtype = np.result_type(x.dtype, W.dtype)
    h = np.zeros((B, H), dtype) if h0 is None else np.broadcast_to(h0, (B, H)).astype(dtype)
    c = np.zeros((B, H), dtype) if c0 is None else np.broadcast_to(c0, (B, H)).astype(dtype)
    h_init, c_init = h, c
    xw = xs @ W + bias
    hs = np.empty((B, T, H), dtype)
    cs = np.empty((B, T, H), dtype)
    gates = np.empty((B, T, 4 * H), dtype)
    for t in range(T):
        z = xw[:, t] + h @ U
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite LSTM pre-activation at step {t}")
        g = np.empty_like(z)
        g[:, :3 * H] = sigmoid(z[:, :3 * H])
        g[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        c = g[:, H:2 * H] * c + g[:, :H] * g[:, 3 * H:]
        h = g[:, 2 * H:3 * H] * np.tanh(c)
        gates[:, t], cs[:, t], hs[:, t] = g, c, h
    out = _take_time(hs, rev) if rev is not None else hs
    cache = (xs, params, h_init, c_init, hs, cs, gates, rev)
    return out, cache


def lstm_backward(dout, cache):
    """Returns ``(dx, grads, dh0, dc0)``."""
    xs, params, h_init, c_init, hs, cs, gates, rev = cache
    W, U = params["W"], params["U"]
    B, T, H = hs.shape
    if rev is not None:
        dout = _take_time(dout, rev)
    dz = np.empty_like(gates)
    dh_next = np.zeros((B, H), hs.dtype)
    dc_next = np.zeros((B, H), hs.dtype)
    for t in range(T - 1, -1, -1):
        g = gates[:, t]
        i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        c_prev = cs[:, t - 1] if t > 0 else c_init
        tc = np.tanh(cs[:, t])
        dh = dout[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dzt = dz[:, t]
        dzt[:, :H] = dc * cand * i * (1.0 - i)
        dzt[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dzt[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dzt[:, 3 * H:] = dc * i * (1.0 - cand * cand)
        dh_next = dzt @ U.T
        dc_next = dc * f
    h_prev = np.concatenate([h_init[:, None, :], hs[:, :-1]], axis=1)
    dz2 = dz.reshape(-1, 4 * H)
    grads = {"W": xs.reshape(-1, xs.shape[-1]).T @ dz2,
             "U": h_prev.reshape(-1, H).T @ dz2,
             "b": dz2.sum(axis=0)}
    dx = dz @ W.T
    if rev is not None:
        dx = _take_time(dx, rev)
    return dx, grads, dh_next, dc_next


def lstm_sequence(inputs, params, direction="forward", h0=None, c0=None):
    """Hidden states for one ``[T, d]`` sequence (or a ``[B, T, d]`` batch)."""
    x = np.asarray(inputs)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1] == 0:
        H = params["U"].shape[0]
        out = np.zeros((x.shape[0], 0, H), dtype=x.dtype)
    else:
        out, _ = lstm_forward(x, params, direction, h0=h0, c0=c0)
    return out[0] if single else out


# --------------------------------------------------------------------------
# character convolution with max-over-time pooling
# --------------------------------------------------------------------------

def init_conv_filters(rng, char_dim, widths, counts, dtype=np.float32):
    filters = []
    for w, m in zip(widths, counts):
        limit = np.sqrt(1.0 / (w * char_dim))
        filters.append({"W": rng.uniform(-limit, limit, (w * char_dim, m)).astype(dtype),
                        "b": np.zeros(m, dtype=dtype)})
    return filters


def conv_forward(x, filters, lengths=None, activation="tanh"):
    """Convolve ``x`` (``[N, L, e]``) with each filter bank and max-pool over time.

    A bank is ``{"W": [w*e, m], "b": [m]}``; its width ``w`` is implied by the
    weight shape. Rows shorter than ``w`` are zero-padded to ``w`` so each
    token yields at least one window; windows reaching past a row's own length
    (into batch padding) are excluded from the max.
    """
    N, L, e = x.shape
    if L == 0:
        raise ValidationError("conv: empty character sequence")
    lengths = np.full(N, L) if lengths is None else np.asarray(lengths)
    if (lengths < 1).any():
        raise ValidationError("conv: empty character sequence")
    act, dact = _activation(activation)
    outs, caches = [], []
    for bank in filters:
        W, b = bank["W"], bank["b"]
        if W.shape[0] % e or b.shape != (W.shape[1],):
            raise DimensionError(
                f"conv: char embeddings have shape {tuple(x.shape)} but filter "
                f"weights have shape {tuple(W.shape)}")
        w = W.shape[0] // e
        Lp = max(L, w)
        xp = x if Lp == L else np.concatenate([x, np.zeros((N, Lp - L, e), x.dtype)], axis=1)
        P = Lp - w + 1
        cols = np.concatenate([xp[:, k:k + P, :] for k in range(w)], axis=-1)
        pre = cols @ W + b
        valid = np.arange(P)[None, :] <= (np.maximum(lengths, w) - w)[:, None]
        pos = np.where(valid[:, :, None], pre, -np.inf).argmax(axis=1)
        best = np.take_along_axis(pre, pos[:, None, :], axis=1)[:, 0, :]
        y = act(best)
        outs.append(y)
        caches.append((cols, pos, y, W, w, Lp, P))
    return np.concatenate(outs, axis=-1), (x.shape, caches, dact)


def conv_backward(dout, cache):
    """Returns ``(dx, [grads per bank])``."""
    (N, L, e), caches, dact = cache
    dx = np.zeros((N, max([L] + [c[5] for c in caches]), e), dout.dtype)
    grads = []
    offset = 0
    for cols, pos, y, W, w, Lp, P in caches:
        m = W.shape[1]
        dbest = dout[:, offset:offset + m] * dact(y)
        offset += m
        onehot = pos[:, None, :] == np.arange(P)[None, :, None]
        dpre = onehot * dbest[:, None, :]
        grads.append({"W": cols.reshape(-1, cols.shape[-1]).T @ dpre.reshape(-1, m),
                      "b": dbest.sum(axis=0)})
        dcols = dpre @ W.T
        for k in range(w):
            dx[:, k:k + P, :] += dcols[:, :, k * e:(k + 1) * e]
    return dx[:, :L, :], grads


def conv_max_over_time(char_embeds, filters, activation="tanh"):
    """Pooled feature vector ``[sum of counts]`` for one token's ``[L, e]`` embeddings."""
    x = np.asarray(char_embeds)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("conv: empty character sequence")
    out, _ = conv_forward(x[None], filters, activation=activation)
    return out[0]


# --------------------------------------------------------------------------
# highway
# --------------------------------------------------------------------------

def init_highway(rng, d, gate_bias=-1.0, dtype=np.float32):
    limit = np.sqrt(1.0 / d)
    return {"W_h": rng.uniform(-limit, limit, (d, d)).astype(dtype),
            "b_h": np.zeros(d, dtype=dtype),
            "W_t": rng.uniform(-limit, limit, (d, d)).astype(dtype),
            "b_t": np.full(d, gate_bias, dtype=dtype)}


def highway_forward(x, params, activation="tanh"):
    """``t * g(x W_h + b_h) + (1 - t) * x`` with transform gate ``t = sigmoid(x W_t + b_t)``."""
    d = x.shape[-1]
    if params["W_h"].shape != (d, d) or params["W_t"].shape != (d, d):
        raise DimensionError(
            f"highway: x has shape {tuple(x.shape)} but W_h has shape "
            f"{tuple(params['W_h'].shape)}; transform must be square")
    act, dact = _activation(activation)
    t = sigmoid(affine(x, params["W_t"], params["b_t"]))
    hval = act(affine(x, params["W_h"], params["b_h"]))
    y = t * hval + (1.0 - t) * x
    return y, (x, params, t, hval, dact)


def highway_backward(dy, cache):
    x, params, t, hval, dact = cache
    dzt = dy * (hval - x) * t * (1.0 - t)
    dzh = dy * t * dact(hval)
    dx_t, dW_t, db_t = affine_backward(dzt, x, params["W_t"])
    dx_h, dW_h, db_h = affine_backward(dzh, x, params["W_h"])
    dx = dy * (1.0 - t) + dx_t + dx_h
    return dx, {"W_h": dW_h, "b_h": db_h, "W_t": dW_t, "b_t": db_t}


def highway(x, params, activation="tanh"):
    return highway_forward(x, params, activation)[0]


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------

def dropout(x, rate, rng, mode="train", return_mask=False):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValidationError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        mask = np.ones_like(x)
    else:
        keep = rng.random(x.shape) >= rate
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = x * mask
    return (out, mask) if return_mask else out


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 0.001

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(first_moment={k: np.zeros_like(v) for k, v in params.items()},
                   second_moment={k: np.zeros_like(v) for k, v in params.items()},
                   **hyper)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Returns new ``(params, state)``.

    Parameters without an entry in ``grads`` are passed through untouched.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(
                f"adam: gradient for {name!r} has shape {g.shape}, "
                f"parameter has shape {params[name].shape}")
    step = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_params = dict(params)
    m_all, v_all = dict(state.first_moment), dict(state.second_moment)
    for name, g in grads.items():
        p = params[name]
        m = b1 * m_all[name] + (1.0 - b1) * g
        v = b2 * v_all[name] + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = (p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
        m_all[name] = m.astype(p.dtype)
        v_all[name] = v.astype(p.dtype)
    new_state = AdamState(m_all, v_all, step, b1, b2, state.epsilon, state.learning_rate)
    return new_params, new_state


def clip_by_global_norm(grads, max_norm):
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def check_gradients(loss_and_grad, params, h=1e-5, max_coords=None, rng=None, dtype=np.float64):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_and_grad(params) -> (loss, grads)``. Each coordinate contributes
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_coords`` caps the coordinates
    probed per parameter (chosen with ``rng``); ``None`` checks all of them.

    Deep models have coordinates whose gradients sit near the ``1e-8`` floor,
    where float64 round-off in the loss dominates the difference quotient;
    pass ``dtype=np.longdouble`` to evaluate them in extended precision.
    """
    params = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    loss, grads = loss_and_grad(params)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    worst = 0.0
    for name, value in params.items():
        analytic = np.asarray(grads.get(name, np.zeros_like(value)), dtype=dtype)
        flat_idx = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            flat_idx = (rng or make_rng(0)).choice(value.size, max_coords, replace=False)
        for j in flat_idx:
            idx = np.unravel_index(j, value.shape)
            orig = value[idx]
            value[idx] = orig + h
            f_plus = loss_and_grad(params)[0]
            value[idx] = orig - h
            f_minus = loss_and_grad(params)[0]
            value[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"loss is not finite when perturbing {name}{idx}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[idx]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, float(abs(a - numeric) / denom))
    return worst
