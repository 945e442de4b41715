"""Forward and hand-derived backward passes for the network layers.

Every forward returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient plus that cache.  Batched layouts:

* waveforms ``(batch, time)``, conv outputs ``(batch, filters, frames)``
* sequences ``(batch, steps, dim)`` with an optional ``(batch, steps)`` 0/1 mask
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dsp_core

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LEAKY_SLOPE = 0.1


class ShapeError(ValueError):
    pass


def _windows(x, length, stride):
    # (batch, frames, length) view; window j of frame n is x[n*stride + j]
    return sliding_window_view(x, length, axis=1)[:, ::stride]


def conv_frames(time, length, stride):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if time < length:
        raise ShapeError(f"input has {time} samples but the kernel needs at least {length}")
    return (time - length) // stride + 1


# -- convolution ---------------------------------------------------------------

def conv1d(x, weights, stride=1):
    """Valid-mode convolution y[n] = sum_l x[l] h[n - l] of every row with every kernel.

    x: (batch, time), weights: (num_filters, length) -> (batch, num_filters, frames)
    """
    x = np.asarray(x, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError("conv1d expects x (batch, time) and weights (filters, length)")
    length = weights.shape[1]
    conv_frames(x.shape[1], length, stride)
    win = _windows(x, length, stride)
    flipped = weights[:, ::-1]
    y = np.einsum("bnl,fl->bfn", win, flipped, optimize=True)
    return y, (x, weights, stride)


def conv1d_backward(dy, cache, need_dx=True):
    x, weights, stride = cache
    length = weights.shape[1]
    win = _windows(x, length, stride)
    dflipped = np.einsum("bfn,bnl->fl", dy, win, optimize=True)
    dw = dflipped[:, ::-1]
    dx = None
    if need_dx:
        dwin = np.einsum("bfn,fl->bnl", dy, weights[:, ::-1], optimize=True)
        dx = np.zeros_like(x)
        frames = dy.shape[2]
        span = (frames - 1) * stride + 1
        for j in range(length):
            dx[:, j:j + span:stride] += dwin[:, :, j]
    return dx, dw


def sinc_conv(x, bank: dsp_core.SincBank, stride=1):
    """Convolution with kernels materialised from the bank's cutoffs."""
    kernels = bank.kernels()
    y, conv_cache = conv1d(x, kernels, stride)
    return y, (bank, conv_cache)


def sinc_conv_backward(dy, cache, need_dx=True):
    """Returns dict with 'theta1', 'theta2' (per filter) and 'x'."""
    bank, conv_cache = cache
    if dy.shape[:2] != (conv_cache[0].shape[0], bank.num_filters):
        raise ShapeError(f"upstream gradient shape {dy.shape} does not match forward output")
    dx, dk = conv1d_backward(dy, conv_cache, need_dx)
    fs = bank.sample_rate
    g1 = np.empty(bank.num_filters)
    g2 = np.empty(bank.num_filters)
    for i, p in enumerate(bank.filters):
        dk1, dk2 = dsp_core.kernel_param_gradients(p, bank.window)
        df1 = dk[i] @ dk1 / fs
        df2 = dk[i] @ dk2 / fs
        jac = dsp_core.cutoff_jacobian(p)
        g1[i] = df1 * jac[0, 0] + df2 * jac[1, 0]
        g2[i] = df2 * jac[1, 1]
    return {"theta1": g1, "theta2": g2, "x": dx}


# -- normalization, activation, pooling -----------------------------------------

class RunningStats:
    def __init__(self, num_features):
        self.mean = np.zeros(num_features)
        self.var = np.ones(num_features)


def _bn_axes(x):
    # feature axis is 1; statistics over every other axis
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def batch_norm(x, gamma, beta, running: RunningStats, mode="train"):
    """Per-feature normalisation, feature axis 1, statistics over all other axes."""
    axes = _bn_axes(x)
    shape = _bn_shape(x)
    if mode == "train":
        count = x.size // x.shape[1]
        if count < 2:
            raise ShapeError("batch_norm in train mode needs at least 2 values per feature")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running.mean = BN_MOMENTUM * running.mean + (1 - BN_MOMENTUM) * mean
        running.var = BN_MOMENTUM * running.var + (1 - BN_MOMENTUM) * var
    elif mode == "eval":
        mean, var = running.mean, running.var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv, gamma, mode)


def batch_norm_backward(dout, cache):
    xhat, inv, gamma, mode = cache
    axes = _bn_axes(xhat)
    shape = _bn_shape(xhat)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if mode == "eval":
        return dxhat * inv.reshape(shape), dgamma, dbeta
    m = xhat.size // xhat.shape[1]
    dx = (inv.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return dx, dgamma, dbeta


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x), (x, slope)


def leaky_relu_backward(dout, cache):
    x, slope = cache
    return np.where(x > 0, dout, slope * dout)


def max_pool(x, window=4):
    """Non-overlapping max over the last axis; a ragged tail is dropped."""
    n = x.shape[-1] // window
    if n < 1:
        raise ShapeError(f"cannot pool {x.shape[-1]} frames with window {window}")
    blocks = x[..., :n * window].reshape(x.shape[:-1] + (n, window))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, window)


def max_pool_backward(dout, cache):
    shape, idx, window = cache
    n = idx.shape[-1]
    dblocks = np.zeros(shape[:-1] + (n, window))
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape)
    dx[..., :n * window] = dblocks.reshape(shape[:-1] + (n * window,))
    return dx


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- dense and loss --------------------------------------------------------------

def dense(x, W, b):
    return x @ W + b, (x, W)


def dense_backward(dout, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ W.T, x2.T @ d2, d2.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    A 1-D ``logits`` with a scalar label gives the per-example loss and
    ``softmax - onehot``; batched inputs average over the batch.
    """
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    lab = np.atleast_1d(np.asarray(labels))
    k = lg.shape[-1]
    if lab.shape[0] != lg.shape[0]:
        raise ShapeError(f"{lg.shape[0]} logit rows but {lab.shape[0]} labels")
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValueError(f"labels must be in 0..{k - 1}, got {lab.tolist()}")
    z = lg - lg.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(lg.shape[0])
    loss = float(np.mean(logz - z[rows, lab]))
    grad = np.exp(z - logz[:, None])
    grad[rows, lab] -= 1.0
    grad /= lg.shape[0]
    return loss, (grad[0] if single else grad)


# -- LSTM --------------------------------------------------------------------------

def lstm_init(rng, input_dim, hidden):
    scale = 1.0 / np.sqrt(input_dim + hidden)
    W = rng.normal(0.0, scale, size=(input_dim + hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget-gate bias
    return {"W": W, "b": b}


def lstm_step(x_t, state, params):
    """One LSTM cell update.  Gate order in W's columns: input, forget, output, candidate."""
    h, c = state
    W, b = params["W"], params["b"]
    H = h.shape[-1]
    if W.shape != (x_t.shape[-1] + H, 4 * H):
        raise ShapeError(f"W has shape {W.shape}, expected {(x_t.shape[-1] + H, 4 * H)}")
    z = np.concatenate([x_t, h], axis=-1)
    a = z @ W + b
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H:2 * H])
    o = sigmoid(a[..., 2 * H:3 * H])
    g = np.tanh(a[..., 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return (h_new, c_new), (z, c, i, f, o, g, tc)


def lstm_step_backward(dh, dc, cache, params):
    """Gradients of one step: returns dx, dh_prev, dc_prev, {'W', 'b'}."""
    z, c, i, f, o, g, tc = cache
    W = params["W"]
    H = dh.shape[-1]
    do = dh * tc
    dcn = dc + dh * o * (1.0 - tc ** 2)
    di = dcn * g
    df = dcn * c
    dg = dcn * i
    dc_prev = dcn * f
    da = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                         do * o * (1 - o), dg * (1 - g ** 2)], axis=-1)
    z2 = z.reshape(-1, z.shape[-1])
    da2 = da.reshape(-1, 4 * H)
    dz = da @ W.T
    nx = z.shape[-1] - H
    return dz[..., :nx], dz[..., nx:], dc_prev, {"W": z2.T @ da2, "b": da2.sum(axis=0)}


def lstm_forward(xs, params, mask=None, state=None):
    """Run the cell over xs (batch, steps, dim).  Masked steps carry the state through."""
    B, T, _ = xs.shape
    H = params["b"].shape[0] // 4
    if state is None:
        state = (np.zeros((B, H)), np.zeros((B, H)))
    h, c = state
    hs = np.empty((B, T, H))
    caches = []
    for t in range(T):
        (hn, cn), cache = lstm_step(xs[:, t], (h, c), params)
        if mask is not None:
            m = mask[:, t:t + 1]
            hn = m * hn + (1 - m) * h
            cn = m * cn + (1 - m) * c
        h, c = hn, cn
        hs[:, t] = h
        caches.append(cache)
    return hs, (caches, mask, xs.shape, params)


def lstm_backward(dhs, cache, dh_last=None, dc_last=None):
    """Backprop through time.  dhs: gradient w.r.t. every emitted hidden state."""
    caches, mask, shape, params = cache
    B, T, D = shape
    H = dhs.shape[-1]
    dxs = np.zeros(shape)
    dW = np.zeros_like(params["W"])
    db = np.zeros_like(params["b"])
    dh = np.zeros((B, H)) if dh_last is None else dh_last.copy()
    dc = np.zeros((B, H)) if dc_last is None else dc_last.copy()
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[:, t]
        if mask is not None:
            m = mask[:, t:t + 1]
            dh_in, dc_in = dh * m, dc * m
            carry_h, carry_c = dh * (1 - m), dc * (1 - m)
        else:
            dh_in, dc_in = dh, dc
            carry_h = carry_c = 0.0
        dx, dhp, dcp, g = lstm_step_backward(dh_in, dc_in, caches[t], params)
        dxs[:, t] = dx
        dW += g["W"]
        db += g["b"]
        dh = dhp + carry_h
        dc = dcp + carry_c
    return dxs, {"W": dW, "b": db}, (dh, dc)


# -- self-attention pooling ----------------------------------------------------------

def attention_init(rng, dim, key_dim=None):
    key_dim = key_dim or dim
    s = 1.0 / np.sqrt(dim)
    return {"Wq": rng.normal(0, s, (dim, key_dim)), "Wk": rng.normal(0, s, (dim, key_dim))}


def self_attention(h, params, mask=None):
    """Single-head scaled dot-product pooling of a sequence into one vector.

    The query is the projected mean of the (unmasked) positions, each position
    is scored by its projected key, and the output is the softmax-weighted sum
    of the positions themselves.  ``h`` is (seq, dim) or (batch, seq, dim).
    """
    h = np.asarray(h, dtype=float)
    single = h.ndim == 2
    if single:
        h = h[None]
        mask = None if mask is None else np.asarray(mask, float)[None]
    B, T, D = h.shape
    if T == 0:
        raise ShapeError("self_attention needs at least one position")
    m = np.ones((B, T)) if mask is None else np.asarray(mask, dtype=float)
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ShapeError("self_attention needs at least one unmasked position per row")
    Wq, Wk = params["Wq"], params["Wk"]
    dk = Wq.shape[1]
    mean = (h * m[..., None]).sum(axis=1) / counts
    q = mean @ Wq
    k = h @ Wk
    scores = np.einsum("btk,bk->bt", k, q) / np.sqrt(dk)
    scores = np.where(m > 0, scores, -np.inf)
    w = np.exp(scores - scores.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("bt,btd->bd", w, h)
    cache = (h, m, counts, mean, q, k, w, params, single)
    return (out[0] if single else out), cache


def attention_weights(cache):
    w = cache[6]
    return w[0] if cache[8] else w


def self_attention_backward(dout, cache):
    h, m, counts, mean, q, k, w, params, single = cache
    if single:
        dout = dout[None]
    Wq, Wk = params["Wq"], params["Wk"]
    dk = Wq.shape[1]
    dh = np.einsum("bt,bd->btd", w, dout)
    dw = np.einsum("btd,bd->bt", h, dout)
    ds = w * (dw - (w * dw).sum(axis=1, keepdims=True)) / np.sqrt(dk)
    dq = np.einsum("bt,btk->bk", ds, k)
    dkk = np.einsum("bt,bk->btk", ds, q)
    dWk = np.einsum("btd,btk->dk", h, dkk)
    dh += dkk @ Wk.T
    dWq = mean.T @ dq
    dmean = dq @ Wq.T
    dh += (m / counts)[..., None] * dmean[:, None, :]
    return (dh[0] if single else dh), {"Wq": dWq, "Wk": dWk}
