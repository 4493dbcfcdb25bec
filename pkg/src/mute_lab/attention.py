"""Attention and feed-forward sub-layers.

Self-attention carries no absolute position signal; instead each head
biases its logits with learned key-side offset vectors indexed by the
clipped pairwise distance between query and key.  Cross-attention is
position-free.  Inputs may be a single sequence ``[n, d]`` or a batch
``[B, n, d]``; masks use ``True`` for disallowed key positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AttentionParams:
    """Projection weights for one multihead attention sub-layer."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.data.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.data.shape != (d, d):
                raise ShapeError(f"attention projections must be {d}x{d}, got {w.data.shape}")
        if d % self.heads != 0:
            raise ShapeError(f"width {d} not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return self.wq.data.shape[0]

    @property
    def head_width(self) -> int:
        return self.width // self.heads

    @classmethod
    def init(cls, d: int, heads: int, rng, dtype=np.float64) -> "AttentionParams":
        ws = [T.parameter(_glorot(rng, d, d, dtype)) for _ in range(4)]
        return cls(*ws, heads=heads)

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


@dataclass
class RelPosTable:
    """Learned key-offset vectors for clipped relative distances.

    Offsets are clipped to ``[-clip, clip]``, so the table holds exactly
    ``2 * clip + 1`` vectors of head width.
    """

    clip: int
    table: Tensor

    def __post_init__(self):
        if self.clip < 1:
            raise ShapeError("relative-position clip distance must be >= 1")
        if self.table.data.shape[0] != 2 * self.clip + 1:
            raise ShapeError(f"offset table needs {2 * self.clip + 1} rows, "
                             f"got {self.table.data.shape[0]}")

    @classmethod
    def init(cls, clip: int, head_width: int, rng, dtype=np.float64) -> "RelPosTable":
        t = T.parameter(_glorot(rng, 2 * clip + 1, head_width, dtype))
        return cls(clip=clip, table=t)

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.relpos": self.table}


@dataclass
class FfnParams:
    """Position-wise feed-forward weights (expand, rectify, contract)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        d, d_ff = self.w1.data.shape
        if d_ff < 1:
            raise ShapeError("feed-forward width must be >= 1")
        if self.b1.data.shape != (d_ff,) or self.w2.data.shape != (d_ff, d) \
                or self.b2.data.shape != (d,):
            raise ShapeError("feed-forward parameter shapes are inconsistent")

    @classmethod
    def init(cls, d: int, d_ff: int, rng, dtype=np.float64) -> "FfnParams":
        return cls(
            w1=T.parameter(_glorot(rng, d, d_ff, dtype)),
            b1=T.parameter(np.zeros(d_ff, dtype=dtype)),
            w2=T.parameter(_glorot(rng, d_ff, d, dtype)),
            b2=T.parameter(np.zeros(d, dtype=dtype)),
        )

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def _glorot(rng, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def rel_index(i: int, j: int, clip: int) -> int:
    """Table index for the offset from query ``i`` to key ``j``."""
    return int(np.clip(j - i, -clip, clip)) + clip


def rel_index_matrix(n_q: int, n_k: int, clip: int) -> np.ndarray:
    offsets = np.arange(n_k)[None, :] - np.arange(n_q)[:, None]
    return np.clip(offsets, -clip, clip) + clip


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.data.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hw = x.data.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * hw))


def _lift_batch(x: Tensor):
    if x.data.ndim == 2:
        n, d = x.data.shape
        return T.reshape(x, (1, n, d)), True
    if x.data.ndim == 3:
        return x, False
    raise ShapeError(f"expected [n,d] or [B,n,d], got {x.data.shape}")


def _lift_mask(mask, batched_rank: int):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    while mask.ndim < batched_rank:
        mask = mask[None]
    return mask


def relative_self_attention(x: Tensor, params: AttentionParams,
                            relpos: RelPosTable, mask=None,
                            capture: dict | None = None) -> Tensor:
    """Multihead self-attention with relative-offset key biasing.

    Returns the attention term only; the caller adds the residual.  Per
    head the logits are ``q . (k + offset)^T / sqrt(head_width)`` and the
    mask marks key positions a query may not attend to.
    """
    x3, squeeze = _lift_batch(x)
    b, n, d = x3.data.shape
    h, hw = params.heads, params.head_width

    q = _split_heads(T.matmul(x3, params.wq), h)
    k = _split_heads(T.matmul(x3, params.wk), h)
    v = _split_heads(T.matmul(x3, params.wv), h)

    content = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))

    idx = rel_index_matrix(n, n, relpos.clip)
    offsets = T.embed(relpos.table, idx)                      # [n, n, hw]
    q_by_pos = T.reshape(T.transpose(q, (2, 0, 1, 3)), (n, b * h, hw))
    rel = T.matmul(q_by_pos, T.transpose(offsets, (0, 2, 1)))  # [n, b*h, n]
    rel = T.transpose(T.reshape(rel, (n, b, h, n)), (1, 2, 0, 3))

    logits = T.scale(T.add(content, rel), 1.0 / math.sqrt(hw))
    mask = _lift_mask(mask, 4)
    weights = T.softmax(logits, axis=-1) if mask is None else T.masked_softmax(logits, mask)
    if capture is not None:
        capture["weights"] = weights.data.mean(axis=1).copy()

    mixed = _merge_heads(T.matmul(weights, v))
    out = T.matmul(mixed, params.wo)
    return T.reshape(out, (n, d)) if squeeze else out


def cross_attention(y: Tensor, enc_out: Tensor, params: AttentionParams,
                    mask=None, capture: dict | None = None) -> Tensor:
    """Attend from decoder states to encoder outputs (no positional term)."""
    y3, squeeze = _lift_batch(y)
    s3, _ = _lift_batch(enc_out)
    if s3.data.shape[1] < 1:
        raise ShapeError("cross_attention needs a nonempty source")
    b, m, d = y3.data.shape
    h, hw = params.heads, params.head_width

    q = _split_heads(T.matmul(y3, params.wq), h)
    k = _split_heads(T.matmul(s3, params.wk), h)
    v = _split_heads(T.matmul(s3, params.wv), h)

    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hw))
    mask = _lift_mask(mask, 4)
    weights = T.softmax(logits, axis=-1) if mask is None else T.masked_softmax(logits, mask)
    if capture is not None:
        capture["weights"] = weights.data.mean(axis=1).copy()

    out = T.matmul(_merge_heads(T.matmul(weights, v)), params.wo)
    return T.reshape(out, (m, d)) if squeeze else out


def ffn_forward(s: Tensor, params: FfnParams) -> Tensor:
    """Rowwise ``w2 . relu(w1 . s + b1) + b2``; residual added by the caller."""
    hidden = T.relu(T.add(T.matmul(s, params.w1), params.b1))
    return T.add(T.matmul(hidden, params.w2), params.b2)
