"""Forward/backward pairs for the transformer building blocks.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache and returns the input gradient plus a
dict of parameter gradients keyed like the parameter dict it was given.
Arrays may carry arbitrary leading batch axes.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def linear_forward(x, W, b):
    return x @ W + b, x


def linear_backward(dy, x, W):
    dx = dy @ W.T
    dW = _flat(x).T @ _flat(dy)
    db = _flat(dy).sum(axis=0)
    return dx, dW, db


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dy, x):
    return dy * (x > 0)


def layer_norm_forward(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = _flat(dy * xhat).sum(axis=0)
    db = _flat(dy).sum(axis=0)
    dxhat = dy * g
    d = xhat.shape[-1]
    dx = inv / d * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dg, db


def softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(Q, K, V):
    """softmax(Q K^T / sqrt(d)) V over the last two axes."""
    scale = 1.0 / np.sqrt(Q.shape[-1])
    P = softmax((Q @ np.swapaxes(K, -1, -2)) * scale)
    return P @ V, (Q, K, V, P, scale)


def attention_backward(dout, cache):
    Q, K, V, P, scale = cache
    dV = np.swapaxes(P, -1, -2) @ dout
    dP = dout @ np.swapaxes(V, -1, -2)
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
    dQ = dS @ K
    dK = np.swapaxes(dS, -1, -2) @ Q
    return dQ, dK, dV


def attention(Q, K, V) -> np.ndarray:
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2] or Q.shape[-1] == 0:
        raise ValueError("attention shape mismatch")
    if not (np.isfinite(Q).all() and np.isfinite(K).all() and np.isfinite(V).all()):
        raise FloatingPointError("non-finite attention input")
    return attention_forward(Q, K, V)[0]


def _split_heads(x, heads):
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, d // heads), -3, -2)


def _merge_heads(x):
    x = np.swapaxes(x, -3, -2)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def mha_forward(x, p, heads):
    """Multi-head self-attention; ``p`` holds Wq, bq, Wk, bk, Wv, bv, Wo, bo."""
    q = _split_heads(x @ p["Wq"] + p["bq"], heads)
    k = _split_heads(x @ p["Wk"] + p["bk"], heads)
    v = _split_heads(x @ p["Wv"] + p["bv"], heads)
    a, acache = attention_forward(q, k, v)
    a = _merge_heads(a)
    return a @ p["Wo"] + p["bo"], (x, a, acache)


def mha_backward(dy, cache, p, heads):
    x, a, acache = cache
    da, g_Wo, g_bo = linear_backward(dy, a, p["Wo"])
    dq, dk, dv = attention_backward(_split_heads(da, heads), acache)
    grads = {"Wo": g_Wo, "bo": g_bo}
    dx = 0
    for name, dh in (("q", dq), ("k", dk), ("v", dv)):
        dxi, grads["W" + name], grads["b" + name] = linear_backward(
            _merge_heads(dh), x, p["W" + name]
        )
        dx = dx + dxi
    return dx, grads


def ffn_forward(x, p):
    h, c1 = linear_forward(x, p["W1"], p["b1"])
    r, c2 = relu_forward(h)
    y, c3 = linear_forward(r, p["W2"], p["b2"])
    return y, (c1, c2, c3)


def ffn_backward(dy, cache, p):
    c1, c2, c3 = cache
    dr, gW2, gb2 = linear_backward(dy, c3, p["W2"])
    dh = relu_backward(dr, c2)
    dx, gW1, gb1 = linear_backward(dh, c1, p["W1"])
    return dx, {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}


def _sub(p, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def encoder_layer_forward(x, p, heads):
    """Post-norm block: x = LN(x + MHA(x)); x = LN(x + FFN(x))."""
    a, ca = mha_forward(x, _sub(p, "attn."), heads)
    y1, cn1 = layer_norm_forward(x + a, p["ln1.g"], p["ln1.b"])
    f, cf = ffn_forward(y1, _sub(p, "ffn."))
    y2, cn2 = layer_norm_forward(y1 + f, p["ln2.g"], p["ln2.b"])
    return y2, (ca, cn1, cf, cn2)


def encoder_layer_backward(dy, cache, p, heads):
    ca, cn1, cf, cn2 = cache
    grads = {}
    ds, grads["ln2.g"], grads["ln2.b"] = layer_norm_backward(dy, cn2)
    dy1, gf = ffn_backward(ds, cf, _sub(p, "ffn."))
    dy1 = dy1 + ds
    ds, grads["ln1.g"], grads["ln1.b"] = layer_norm_backward(dy1, cn1)
    dx, ga = mha_backward(ds, ca, _sub(p, "attn."), heads)
    dx = dx + ds
    grads.update({"ffn." + k: v for k, v in gf.items()})
    grads.update({"attn." + k: v for k, v in ga.items()})
    return dx, grads


def encoder_stack_forward(x, p, layers, heads):
    caches = []
    for i in range(layers):
        x, c = encoder_layer_forward(x, _sub(p, f"{i}."), heads)
        caches.append(c)
    return x, caches


def encoder_stack_backward(dy, caches, p, heads):
    grads = {}
    for i in reversed(range(len(caches))):
        dy, g = encoder_layer_backward(dy, caches[i], _sub(p, f"{i}."), heads)
        grads.update({f"{i}.{k}": v for k, v in g.items()})
    return dy, grads


def positional_encoding(length: int, width: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal table: PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(...)."""
    if width % 2:
        raise ValueError(f"positional encoding width must be even, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, width, 2, dtype=np.float64) / width)
    pe = np.empty((length, width))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe.astype(dtype, copy=False)
