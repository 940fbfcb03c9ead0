"""Loop-level reference implementations used to certify the vectorised kernels.

These are deliberately naive: explicit Python loops over every output element,
sharing no code with :mod:`nextvit.ops` or :mod:`nextvit.blocks`.
"""
from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    og = cout // groups
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            g = o // og
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ci in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                r = y * stride + i - padding
                                s = xx * stride + j - padding
                                if 0 <= r < h and 0 <= s < w:
                                    acc += weight[o, ci, i, j] * x[b, g * cg + ci, r, s]
                    out[b, o, y, xx] = acc
    return out


def naive_avg_pool(x, k, stride):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    total = 0.0
                    for i in range(k):
                        for j in range(k):
                            total += x[b, ch, y * stride + i, xx * stride + j]
                    out[b, ch, y, xx] = total / (k * k)
    return out


def scalar_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def brute_force_attention(q, k, v, scale):
    """Per (batch, head, query): explicit loop over keys for scores and the weighted sum."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    n, heads, nq, d = q.shape
    nk = k.shape[2]
    out = np.zeros((n, heads, nq, d))
    for b in range(n):
        for hd in range(heads):
            for i in range(nq):
                scores = [float(np.dot(q[b, hd, i], k[b, hd, j])) * scale for j in range(nk)]
                probs = scalar_softmax(scores)
                acc = np.zeros(d)
                for j in range(nk):
                    acc += probs[j] * v[b, hd, j]
                out[b, hd, i] = acc
    return out


def full_attention_layer(x, wq, bq, wk, bk, wv, bv, wp, bp, heads, scale):
    """Plain multi-head self-attention over all spatial tokens of ``(n, c, h, w)``."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    d = c // heads
    out = np.zeros_like(x)
    for b in range(n):
        tokens = x[b].reshape(c, h * w).T
        q, k, v = tokens @ wq.T + bq, tokens @ wk.T + bk, tokens @ wv.T + bv
        merged = np.zeros((h * w, c))
        for hd in range(heads):
            sl = slice(hd * d, (hd + 1) * d)
            for i in range(h * w):
                scores = [float(q[i, sl] @ k[j, sl]) * scale for j in range(h * w)]
                probs = scalar_softmax(scores)
                merged[i, sl] = sum(p * v[j, sl] for j, p in enumerate(probs))
        y = merged @ wp.T + bp
        out[b] = y.T.reshape(c, h, w)
    return out
