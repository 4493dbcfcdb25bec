"""Loop-based single-unit transformer, written against the checkpoint
parameter naming rather than the library internals.

This is a deliberately plain reimplementation of the single-unit
relative-position encoder-decoder: per-head and per-position loops,
numpy only, no autodiff types.  It exists so the main model can be
cross-checked against code that shares none of its machinery.  Inputs
are single unpadded sequences.
"""

from __future__ import annotations

import math

import numpy as np


def softmax_row(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def layer_norm_rows(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                    eps: float = 1e-6) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mu = np.mean(row)
        var = np.mean((row - mu) ** 2)
        out[i] = (row - mu) / np.sqrt(var + eps) * gain + bias
    return out


def self_attention(x: np.ndarray, wq, wk, wv, wo, relpos, clip: int,
                   heads: int, causal: bool = False) -> np.ndarray:
    n, d = x.shape
    hw = d // heads
    q_all = x @ wq
    k_all = x @ wk
    v_all = x @ wv
    merged = np.zeros((n, d))
    for h in range(heads):
        cols = slice(h * hw, (h + 1) * hw)
        q, k, v = q_all[:, cols], k_all[:, cols], v_all[:, cols]
        for i in range(n):
            logits = np.empty(n)
            for j in range(n):
                offset = relpos[min(max(j - i, -clip), clip) + clip]
                logits[j] = (q[i] @ k[j] + q[i] @ offset) / math.sqrt(hw)
            if causal:
                logits[i + 1:] = -np.inf
            w = softmax_row(logits)
            merged[i, cols] = w @ v
    return merged @ wo


def cross_attention(y: np.ndarray, enc: np.ndarray, wq, wk, wv, wo,
                    heads: int) -> np.ndarray:
    m, d = y.shape
    n = enc.shape[0]
    hw = d // heads
    q_all = y @ wq
    k_all = enc @ wk
    v_all = enc @ wv
    merged = np.zeros((m, d))
    for h in range(heads):
        cols = slice(h * hw, (h + 1) * hw)
        q, k, v = q_all[:, cols], k_all[:, cols], v_all[:, cols]
        for i in range(m):
            logits = np.array([q[i] @ k[j] for j in range(n)]) / math.sqrt(hw)
            merged[i, cols] = softmax_row(logits) @ v
    return merged @ wo


def ffn(s: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    return np.maximum(s @ w1 + b1, 0.0) @ w2 + b2


def forward_logits(params: dict, src: np.ndarray, tgt_in: np.ndarray,
                   d: int, heads: int, clip: int, n_enc: int,
                   n_dec: int) -> np.ndarray:
    """Full forward pass; ``params`` holds checkpoint-named arrays."""
    p = params
    x = p["src_embed"][np.asarray(src)] * math.sqrt(d)
    for k in range(n_enc):
        a = self_attention(x, p[f"enc{k}.u0.attn.wq"], p[f"enc{k}.u0.attn.wk"],
                           p[f"enc{k}.u0.attn.wv"], p[f"enc{k}.u0.attn.wo"],
                           p[f"enc{k}.u0.attn.relpos"], clip, heads)
        s = layer_norm_rows(x + a, p[f"enc{k}.u0.norm1.gain"],
                            p[f"enc{k}.u0.norm1.bias"])
        f = ffn(s, p[f"enc{k}.u0.ffn.w1"], p[f"enc{k}.u0.ffn.b1"],
                p[f"enc{k}.u0.ffn.w2"], p[f"enc{k}.u0.ffn.b2"])
        x = layer_norm_rows(s + f, p[f"enc{k}.u0.norm2.gain"],
                            p[f"enc{k}.u0.norm2.bias"])
    y = p["tgt_embed"][np.asarray(tgt_in)] * math.sqrt(d)
    for k in range(n_dec):
        a = self_attention(y, p[f"dec{k}.self.wq"], p[f"dec{k}.self.wk"],
                           p[f"dec{k}.self.wv"], p[f"dec{k}.self.wo"],
                           p[f"dec{k}.self.relpos"], clip, heads, causal=True)
        y = layer_norm_rows(y + a, p[f"dec{k}.norm1.gain"],
                            p[f"dec{k}.norm1.bias"])
        c = cross_attention(y, x, p[f"dec{k}.cross.wq"], p[f"dec{k}.cross.wk"],
                            p[f"dec{k}.cross.wv"], p[f"dec{k}.cross.wo"],
                            heads)
        y = layer_norm_rows(y + c, p[f"dec{k}.norm2.gain"],
                            p[f"dec{k}.norm2.bias"])
        f = ffn(y, p[f"dec{k}.ffn.w1"], p[f"dec{k}.ffn.b1"],
                p[f"dec{k}.ffn.w2"], p[f"dec{k}.ffn.b2"])
        y = layer_norm_rows(y + f, p[f"dec{k}.norm3.gain"],
                            p[f"dec{k}.norm3.bias"])
    return y @ p["out.w"] + p["out.b"]
