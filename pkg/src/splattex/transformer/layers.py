"""Transformer primitives with hand-written backward passes.

Every ``*_fwd`` returns ``(out, cache)`` and the matching ``*_bwd`` takes the
upstream gradient and the cache, returning input gradients plus a dict of
parameter gradients keyed like the parameter dict. Activations are batched
token sets of shape (B, n, d).
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-6
GELU_C = float(np.sqrt(2.0 / np.pi))


def linear_fwd(x, w, b):
    return x @ w + b, x


def linear_bwd(dy, x, w):
    d = x.shape[-1]
    dw = x.reshape(-1, d).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w.T, dw, db


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_bwd(dy, cache):
    xhat, rstd, g = cache
    d = dy.shape[-1]
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def gelu_fwd(x):
    inner = GELU_C * x * (1.0 + 0.044715 * (x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, h):
    B, n, d = x.shape
    return x.reshape(B, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, h * dh)


def mha_fwd(x, p, heads: int):
    """Multi-head self-attention within each set of ``x`` (B, n, d).

    ``p`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``.
    """
    d = x.shape[-1]
    if d % heads:
        raise ValueError("token dimension must be divisible by the head count")
    scale = 1.0 / float(np.sqrt(d // heads))
    q = _split_heads(x @ p["wq"] + p["bq"], heads)
    k = _split_heads(x @ p["wk"] + p["bk"], heads)
    v = _split_heads(x @ p["wv"] + p["bv"], heads)
    att = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = _merge_heads(att @ v)
    return o @ p["wo"] + p["bo"], (x, q, k, v, att, o, scale)


def mha_bwd(dy, cache, p):
    x, q, k, v, att, o, scale = cache
    heads = q.shape[1]
    d = x.shape[-1]
    grads = {
        "wo": o.reshape(-1, d).T @ dy.reshape(-1, d),
        "bo": dy.reshape(-1, d).sum(axis=0),
    }
    do = _split_heads(dy @ p["wo"].T, heads)
    datt = do @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ do
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    xf = x.reshape(-1, d)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dm = _merge_heads(dproj)
        grads["w" + name] = xf.T @ dm.reshape(-1, d)
        grads["b" + name] = dm.reshape(-1, d).sum(axis=0)
        dx += dm @ p["w" + name].T
    return dx, grads


def block_fwd(x, p, heads: int):
    """Pre-norm residual block: x + MHA(LN(x)), then + MLP(LN(.)).

    Keys of ``p``: ``ln1.g ln1.b attn.* ln2.g ln2.b mlp.w1 mlp.b1 mlp.w2 mlp.b2``.
    """
    h1, c_ln1 = layernorm_fwd(x, p["ln1.g"], p["ln1.b"])
    attn_p = {k[5:]: v for k, v in p.items() if k.startswith("attn.")}
    a, c_attn = mha_fwd(h1, attn_p, heads)
    x1 = x + a
    h2, c_ln2 = layernorm_fwd(x1, p["ln2.g"], p["ln2.b"])
    u = h2 @ p["mlp.w1"] + p["mlp.b1"]
    gu, c_gelu = gelu_fwd(u)
    out = x1 + gu @ p["mlp.w2"] + p["mlp.b2"]
    return out, (c_ln1, c_attn, attn_p, h2, c_ln2, gu, c_gelu)


def block_bwd(dout, cache, p):
    c_ln1, c_attn, attn_p, h2, c_ln2, gu, c_gelu = cache
    d = dout.shape[-1]
    grads = {}
    df = dout.reshape(-1, d)
    grads["mlp.w2"] = gu.reshape(-1, gu.shape[-1]).T @ df
    grads["mlp.b2"] = df.sum(axis=0)
    du = gelu_bwd(dout @ p["mlp.w2"].T, c_gelu)
    duf = du.reshape(-1, du.shape[-1])
    grads["mlp.w1"] = h2.reshape(-1, d).T @ duf
    grads["mlp.b1"] = duf.sum(axis=0)
    dln2, grads["ln2.g"], grads["ln2.b"] = layernorm_bwd(du @ p["mlp.w1"].T, c_ln2)
    dx1 = dout + dln2
    dh1, g_attn = mha_bwd(dx1, c_attn, attn_p)
    for k, v in g_attn.items():
        grads["attn." + k] = v
    dln1, grads["ln1.g"], grads["ln1.b"] = layernorm_bwd(dh1, c_ln1)
    return dx1 + dln1, grads
