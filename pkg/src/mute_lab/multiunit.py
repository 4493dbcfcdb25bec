"""Multi-unit layers: parallel units, input-noise bias, fusion.

A unit is one self-attention sub-layer plus one feed-forward sub-layer
with private parameters and post-norms.  A multi-unit layer runs several
units over (possibly noise-biased) copies of its input and fuses their
outputs, either as a plain weighted sum or through a learned soft
ordering followed by prefix-sum accumulation.

Noise is a training-only device.  Each unit owns one noise kind; a
per-sequence switch decides whether the whole layer sees biased inputs
for that sequence.  Evaluation is always noise-free and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, FfnParams, RelPosTable, ffn_forward,
                        relative_self_attention)
from .errors import ConfigError, ShapeError
from .shuffle import ShuffleMatrix, permute_outputs
from .tensor import Tensor

MODE_PLAIN = "plain"
MODE_BIASED = "biased"
MODE_SEQ_BIASED = "seq_biased"
MODES = (MODE_PLAIN, MODE_BIASED, MODE_SEQ_BIASED)


@dataclass(frozen=True)
class NoiseKind:
    """One of identity, swap, disorder, or mask.

    ``span`` is the swap range or disorder window; both default to 3 and
    are ignored for identity and mask.
    """

    kind: str
    span: int = 0

    def __post_init__(self):
        if self.kind not in ("identity", "swap", "disorder", "mask"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.kind == "swap" and self.span < 1:
            raise ConfigError("swap range must be >= 1")
        if self.kind == "disorder" and self.span < 2:
            raise ConfigError("disorder window must be >= 2")

    @classmethod
    def parse(cls, text: str) -> "NoiseKind":
        name, _, arg = text.strip().partition(":")
        if name in ("identity", "mask"):
            return cls(name)
        return cls(name, int(arg) if arg else 3)

    def __str__(self):
        if self.kind in ("identity", "mask"):
            return self.kind
        return f"{self.kind}:{self.span}"


DEFAULT_NOISES = (NoiseKind("identity"), NoiseKind("swap", 3),
                  NoiseKind("disorder", 3), NoiseKind("mask"))


@dataclass
class BiasConfig:
    """Per-unit noise assignment plus the sampling switch."""

    kinds: tuple
    sample_rate: float
    mask_embedding: Tensor

    def __post_init__(self):
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ConfigError(f"sample rate must be in [0,1], got {self.sample_rate}")


@dataclass
class UnitParams:
    """Private parameters of one unit."""

    attn: AttentionParams
    relpos: RelPosTable
    norm1_gain: Tensor
    norm1_bias: Tensor
    ffn: FfnParams
    norm2_gain: Tensor
    norm2_bias: Tensor

    @classmethod
    def init(cls, d, d_ff, heads, clip, rng, dtype=np.float64):
        return cls(
            attn=AttentionParams.init(d, heads, rng, dtype),
            relpos=RelPosTable.init(clip, d // heads, rng, dtype),
            norm1_gain=T.parameter(np.ones(d, dtype=dtype)),
            norm1_bias=T.parameter(np.zeros(d, dtype=dtype)),
            ffn=FfnParams.init(d, d_ff, rng, dtype),
            norm2_gain=T.parameter(np.ones(d, dtype=dtype)),
            norm2_bias=T.parameter(np.zeros(d, dtype=dtype)),
        )

    def named(self, prefix: str) -> dict:
        out = {}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update(self.relpos.named(f"{prefix}.attn"))
        out[f"{prefix}.norm1.gain"] = self.norm1_gain
        out[f"{prefix}.norm1.bias"] = self.norm1_bias
        out.update(self.ffn.named(f"{prefix}.ffn"))
        out[f"{prefix}.norm2.gain"] = self.norm2_gain
        out[f"{prefix}.norm2.bias"] = self.norm2_bias
        return out


@dataclass
class MuteLayerState:
    """Everything one multi-unit layer holds.

    Tied-submodule variants (shared attention or shared FFN across
    units) are built by placing the same parameter object in several
    unit bundles; the layer itself does not care.
    """

    units: list
    alpha: Tensor
    bias: BiasConfig
    mode: str
    shuffle: ShuffleMatrix | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown layer mode {self.mode!r}")
        if (self.mode == MODE_SEQ_BIASED) != (self.shuffle is not None):
            raise ConfigError("shuffle matrix must be present exactly in seq_biased mode")
        if len(self.units) < 1:
            raise ConfigError("a layer needs at least one unit")

    @property
    def unit_count(self) -> int:
        return len(self.units)


# ---------------------------------------------------------------------------
# bias module
# ---------------------------------------------------------------------------

def sample_switch(sample_rate: float, rng) -> bool:
    """True with probability ``sample_rate``; the caller skips this in eval."""
    if not 0.0 <= sample_rate <= 1.0:
        raise ConfigError(f"sample rate must be in [0,1], got {sample_rate}")
    return bool(rng.random() < sample_rate)


def draw_noise(kind: NoiseKind, n: int, rng):
    """Draw one noise realization for a length-``n`` sequence.

    Returns ``(permutation | None, mask_position | None)``.  Swap and
    disorder degrade to identity when no valid pair or window exists.
    Each call applies its operation exactly once.
    """
    if kind.kind == "identity":
        return None, None
    if kind.kind == "mask":
        return None, int(rng.integers(0, n))
    if n < 2:
        return None, None
    if kind.kind == "swap":
        i = int(rng.integers(0, n - 1))
        delta = int(rng.integers(1, kind.span + 1))
        j = min(i + delta, n - 1)
        perm = np.arange(n)
        perm[i], perm[j] = perm[j], perm[i]
        return perm, None
    window = min(kind.span, n)
    start = int(rng.integers(0, n - window + 1))
    local = rng.permutation(window)
    perm = np.arange(n)
    perm[start:start + window] = start + local
    return perm, None


def apply_bias(x: Tensor, kind: NoiseKind, rng,
               mask_embedding: Tensor | None = None) -> Tensor:
    """Apply one noise draw to a single sequence ``[n, d]``."""
    if x.data.ndim != 2:
        raise ShapeError(f"apply_bias expects [n,d], got {x.data.shape}")
    n = x.data.shape[0]
    perm, mask_pos = draw_noise(kind, n, rng)
    if perm is None and mask_pos is None:
        return x
    x3 = T.reshape(x, (1, n, -1))
    if perm is not None:
        out = T.gather_rows(x3, perm[None, :])
    else:
        if mask_embedding is None:
            raise ConfigError("mask noise needs a mask embedding")
        keep = np.ones((1, n, 1), dtype=x.data.dtype)
        keep[0, mask_pos, 0] = 0.0
        out = T.add(T.mul(x3, Tensor(keep)), T.mul(mask_embedding, Tensor(1.0 - keep)))
    return T.reshape(out, x.data.shape)


def _biased_inputs(x: Tensor, state: MuteLayerState, rng, lengths) -> list:
    """Per-unit biased copies of a batched input ``[B, n, d]``.

    One switch draw per sequence; a switched-off sequence stays unbiased
    for every unit.  Draw order is fixed: the switch vector first, then
    unit by unit, sequence by sequence.
    """
    batch, n, _ = x.data.shape
    if lengths is None:
        lengths = np.full(batch, n, dtype=int)
    enabled = rng.random(batch) < state.bias.sample_rate
    inputs = []
    for kind in state.bias.kinds:
        if kind.kind == "identity" or not enabled.any():
            inputs.append(x)
            continue
        perm = np.tile(np.arange(n), (batch, 1))
        mask_sel = np.zeros((batch, n, 1), dtype=x.data.dtype)
        touched = False
        for b in range(batch):
            if not enabled[b]:
                continue
            p, pos = draw_noise(kind, int(lengths[b]), rng)
            if p is not None:
                perm[b, :len(p)] = p
                touched = True
            elif pos is not None:
                mask_sel[b, pos, 0] = 1.0
                touched = True
        if not touched:
            inputs.append(x)
        elif kind.kind == "mask":
            keep = Tensor(1.0 - mask_sel)
            inputs.append(T.add(T.mul(x, keep),
                                T.mul(state.bias.mask_embedding, Tensor(mask_sel))))
        else:
            inputs.append(T.gather_rows(x, perm))
    return inputs


# ---------------------------------------------------------------------------
# unit forward and fusion
# ---------------------------------------------------------------------------

def unit_forward(x: Tensor, unit: UnitParams, mask=None, eps: float = 1e-6,
                 dropout_rate: float = 0.0, dropout_rng=None,
                 capture: dict | None = None) -> Tensor:
    """One full unit: residual attention, post-norm, residual FFN, post-norm."""
    attn_cap = {} if capture is not None else None
    attn = relative_self_attention(x, unit.attn, unit.relpos, mask=mask,
                                   capture=attn_cap)
    if capture is not None:
        capture["attn_weights"] = attn_cap["weights"]
        capture["attn_out"] = attn.data.copy()
    attn = _dropout(attn, dropout_rate, dropout_rng)
    s = T.layer_norm(T.add(x, attn), unit.norm1_gain, unit.norm1_bias, eps)
    f = ffn_forward(s, unit.ffn)
    if capture is not None:
        capture["ffn_out"] = f.data.copy()
    f = _dropout(f, dropout_rate, dropout_rng)
    return T.layer_norm(T.add(s, f), unit.norm2_gain, unit.norm2_bias, eps)


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return T.mul(x, Tensor(keep))


def fuse_parallel(outputs: list, alpha: Tensor) -> Tensor:
    """Weighted sum of unit outputs with learnable scalars."""
    total = None
    for i, out in enumerate(outputs):
        term = T.mul(T.index0(alpha, i), out)
        total = term if total is None else T.add(total, term)
    return total


def accumulate_sequential(outputs: list) -> list:
    """Prefix sums, so each output is the residual of what came before."""
    acc = []
    running = None
    for out in outputs:
        running = out if running is None else T.add(running, out)
        acc.append(running)
    return acc


def fuse_sequential(accumulated: list, alpha: Tensor) -> Tensor:
    """Weighted sum of mean-normalized prefix accumulations."""
    total = None
    for i, acc in enumerate(accumulated):
        term = T.mul(T.index0(alpha, i), T.scale(acc, 1.0 / (i + 1)))
        total = term if total is None else T.add(total, term)
    return total


def mute_layer_forward(x: Tensor, state: MuteLayerState, training: bool,
                       rng=None, mask=None, lengths=None, eps: float = 1e-6,
                       dropout_rate: float = 0.0, dropout_rng=None,
                       capture=None) -> Tensor:
    """Run one multi-unit layer in its configured mode.

    In evaluation mode no randomness is consumed and the output depends
    only on the input and parameters.  ``capture``, when given, is a
    callable ``capture(unit_index, record)`` receiving the per-unit
    intermediate activations.
    """
    batched = x.data.ndim == 3
    noisy = (training and state.mode in (MODE_BIASED, MODE_SEQ_BIASED)
             and any(k.kind != "identity" for k in state.bias.kinds))
    if noisy:
        if rng is None:
            raise ConfigError("training with bias noise needs an rng handle")
        x3 = x if batched else T.reshape(x, (1,) + x.data.shape)
        inputs3 = _biased_inputs(x3, state, rng, lengths)
        inputs = inputs3 if batched else [T.reshape(t, x.data.shape) for t in inputs3]
    else:
        inputs = [x] * state.unit_count

    if not training:
        dropout_rate = 0.0
    outputs = []
    for i, unit in enumerate(state.units):
        cap = {} if capture is not None else None
        outputs.append(unit_forward(inputs[i], unit, mask=mask, eps=eps,
                                    dropout_rate=dropout_rate,
                                    dropout_rng=dropout_rng, capture=cap))
        if capture is not None:
            capture(i, cap)

    if state.mode in (MODE_PLAIN, MODE_BIASED):
        return fuse_parallel(outputs, state.alpha)
    ordered = permute_outputs(state.shuffle, outputs)
    return fuse_sequential(accumulate_sequential(ordered), state.alpha)
