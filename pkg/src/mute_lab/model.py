"""Encoder-decoder model: multi-unit encoder, single-unit decoder.

The encoder stacks multi-unit layers; the decoder is a conventional
stack of single-unit layers with causal self-attention and
cross-attention into the encoder output.  Positions enter only through
relative-offset tables inside self-attention; there are no absolute
position embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, FfnParams, RelPosTable,
                        cross_attention, ffn_forward, relative_self_attention)
from .errors import ConfigError, ContractError, DataError
from .multiunit import (DEFAULT_NOISES, MODE_PLAIN, MODE_SEQ_BIASED, MODES,
                        BiasConfig, MuteLayerState, NoiseKind, UnitParams,
                        mute_layer_forward)
from .rng import stream
from .shuffle import ShuffleMatrix, penalty
from .tasks import BOS, EOS, PAD, SPECIAL
from .tensor import Tensor


def default_noises(units: int) -> tuple:
    """Cycle identity / swap(3) / disorder(3) / mask over the units."""
    return tuple(DEFAULT_NOISES[i % len(DEFAULT_NOISES)] for i in range(units))


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    d_ff: int = 256
    heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    units: int = 4
    mode: str = "seq_biased"
    noises: tuple = ()
    sample_rate: float = 0.85
    clip: int = 8
    dropout: float = 0.1
    label_smooth: float = 0.1
    penalty_weight: float = 0.1
    src_vocab: int = 23
    tgt_vocab: int = 23
    max_len: int = 64
    share_unit_attention: bool = False
    share_unit_ffn: bool = False

    def __post_init__(self):
        if self.noises == ():
            object.__setattr__(self, "noises", default_noises(self.units))
        if min(self.d, self.d_ff, self.heads, self.n_enc, self.n_dec,
               self.units, self.clip, self.max_len) < 1:
            raise ConfigError("all size fields must be positive")
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if len(self.noises) != self.units:
            raise ConfigError(
                f"{len(self.noises)} noise kinds for {self.units} units")
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ConfigError("sample rate must be in [0,1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0,1)")
        if not 0.0 <= self.label_smooth < 1.0:
            raise ConfigError("label smoothing must be in [0,1)")
        if self.penalty_weight < 0.0:
            raise ConfigError("penalty weight must be >= 0")
        if min(self.src_vocab, self.tgt_vocab) <= SPECIAL:
            raise ConfigError("vocab must exceed the special ids")

    @property
    def uses_mask_noise(self) -> bool:
        return (self.mode != MODE_PLAIN
                and any(k.kind == "mask" for k in self.noises))


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    relpos: RelPosTable
    norm1_gain: Tensor
    norm1_bias: Tensor
    cross: AttentionParams
    norm2_gain: Tensor
    norm2_bias: Tensor
    ffn: FfnParams
    norm3_gain: Tensor
    norm3_bias: Tensor

    @classmethod
    def init(cls, d, d_ff, heads, clip, rng, dtype=np.float64):
        def norm_pair():
            return (T.parameter(np.ones(d, dtype=dtype)),
                    T.parameter(np.zeros(d, dtype=dtype)))
        n1 = norm_pair()
        n2 = norm_pair()
        n3 = norm_pair()
        return cls(
            self_attn=AttentionParams.init(d, heads, rng, dtype),
            relpos=RelPosTable.init(clip, d // heads, rng, dtype),
            norm1_gain=n1[0], norm1_bias=n1[1],
            cross=AttentionParams.init(d, heads, rng, dtype),
            norm2_gain=n2[0], norm2_bias=n2[1],
            ffn=FfnParams.init(d, d_ff, rng, dtype),
            norm3_gain=n3[0], norm3_bias=n3[1],
        )

    def named(self, prefix: str) -> dict:
        out = {}
        out.update(self.self_attn.named(f"{prefix}.self"))
        out.update(self.relpos.named(f"{prefix}.self"))
        out[f"{prefix}.norm1.gain"] = self.norm1_gain
        out[f"{prefix}.norm1.bias"] = self.norm1_bias
        out.update(self.cross.named(f"{prefix}.cross"))
        out[f"{prefix}.norm2.gain"] = self.norm2_gain
        out[f"{prefix}.norm2.bias"] = self.norm2_bias
        out.update(self.ffn.named(f"{prefix}.ffn"))
        out[f"{prefix}.norm3.gain"] = self.norm3_gain
        out[f"{prefix}.norm3.bias"] = self.norm3_bias
        return out


def causal_mask(m: int) -> np.ndarray:
    """True above the diagonal: position i may not attend to j > i."""
    return np.triu(np.ones((m, m), dtype=bool), k=1)


class MuteModel:
    """Full model; parameters are created once from a seeded stream."""

    def __init__(self, config: ModelConfig, seed: int = 1,
                 dtype=np.float64):
        self.config = config
        self.seed = int(seed)
        self.dtype = dtype
        rng = stream(self.seed, "init")
        c = config
        emb_scale = 1.0 / math.sqrt(c.d)
        self.src_embed = T.parameter(
            rng.normal(0.0, emb_scale, (c.src_vocab, c.d)).astype(dtype))
        self.tgt_embed = T.parameter(
            rng.normal(0.0, emb_scale, (c.tgt_vocab, c.d)).astype(dtype))
        self.mask_embed = None
        if c.uses_mask_noise:
            self.mask_embed = T.parameter(
                rng.normal(0.0, emb_scale, c.d).astype(dtype))
        self.encoder = [self._build_enc_layer(rng) for _ in range(c.n_enc)]
        self.decoder = [
            DecoderLayerParams.init(c.d, c.d_ff, c.heads, c.clip, rng, dtype)
            for _ in range(c.n_dec)]
        bound = math.sqrt(6.0 / (c.d + c.tgt_vocab))
        self.out_w = T.parameter(
            rng.uniform(-bound, bound, (c.d, c.tgt_vocab)).astype(dtype))
        self.out_b = T.parameter(np.zeros(c.tgt_vocab, dtype=dtype))

    def _build_enc_layer(self, rng) -> MuteLayerState:
        c = self.config
        units = []
        for i in range(c.units):
            if i and (c.share_unit_attention or c.share_unit_ffn):
                fresh = UnitParams.init(c.d, c.d_ff, c.heads, c.clip, rng,
                                        self.dtype)
                first = units[0]
                units.append(UnitParams(
                    attn=first.attn if c.share_unit_attention else fresh.attn,
                    relpos=first.relpos if c.share_unit_attention else fresh.relpos,
                    norm1_gain=fresh.norm1_gain, norm1_bias=fresh.norm1_bias,
                    ffn=first.ffn if c.share_unit_ffn else fresh.ffn,
                    norm2_gain=fresh.norm2_gain, norm2_bias=fresh.norm2_bias))
            else:
                units.append(UnitParams.init(c.d, c.d_ff, c.heads, c.clip,
                                             rng, self.dtype))
        alpha = T.parameter(np.full(c.units, 1.0 / c.units, dtype=self.dtype))
        shuffle = None
        if c.mode == MODE_SEQ_BIASED:
            shuffle = ShuffleMatrix.init_jittered(c.units, rng, self.dtype)
        bias = BiasConfig(kinds=tuple(c.noises), sample_rate=c.sample_rate,
                          mask_embedding=self.mask_embed)
        return MuteLayerState(units=units, alpha=alpha, bias=bias,
                              mode=c.mode, shuffle=shuffle)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> dict:
        """Insertion-ordered name -> Tensor; shared objects appear once."""
        out: dict = {}
        seen: set = set()

        def put(name, tensor):
            if id(tensor) not in seen:
                seen.add(id(tensor))
                out[name] = tensor

        put("src_embed", self.src_embed)
        put("tgt_embed", self.tgt_embed)
        if self.mask_embed is not None:
            put("mask_embed", self.mask_embed)
        for k, layer in enumerate(self.encoder):
            for i, unit in enumerate(layer.units):
                for name, t in unit.named(f"enc{k}.u{i}").items():
                    put(name, t)
            put(f"enc{k}.alpha", layer.alpha)
            if layer.shuffle is not None:
                put(f"enc{k}.shuffle", layer.shuffle.m)
        for k, layer in enumerate(self.decoder):
            for name, t in layer.named(f"dec{k}").items():
                put(name, t)
        put("out.w", self.out_w)
        put("out.b", self.out_b)
        return out

    def shuffle_matrices(self) -> list:
        return [l.shuffle for l in self.encoder if l.shuffle is not None]

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None

    # -- forward passes -----------------------------------------------------

    def _check_ids(self, ids: np.ndarray, vocab: int, what: str):
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise DataError(f"{what} id out of range [0, {vocab})")

    def encode(self, src: np.ndarray, training: bool = False, noise_rng=None,
               dropout_rng=None, capture=None) -> Tensor:
        """Token ids [B, n] -> encoder output [B, n, d]."""
        c = self.config
        src = np.asarray(src)
        self._check_ids(src, c.src_vocab, "source")
        pad = src == PAD
        lengths = (~pad).sum(axis=1)
        mask = pad[:, None, None, :]
        x = T.scale(T.embed(self.src_embed, src), math.sqrt(c.d))
        for k, layer in enumerate(self.encoder):
            cap = None
            if capture is not None:
                cap = lambda i, rec, k=k: capture(k, i, rec)
            x = mute_layer_forward(x, layer, training=training, rng=noise_rng,
                                   mask=mask, lengths=lengths,
                                   dropout_rate=c.dropout if training else 0.0,
                                   dropout_rng=dropout_rng, capture=cap)
        return x

    def decode(self, tgt_in: np.ndarray, enc_out: Tensor,
               src_pad: np.ndarray, training: bool = False,
               dropout_rng=None) -> Tensor:
        """Decoder input ids [B, m] -> decoder output [B, m, d]."""
        c = self.config
        tgt_in = np.asarray(tgt_in)
        self._check_ids(tgt_in, c.tgt_vocab, "target")
        m = tgt_in.shape[1]
        self_mask = (causal_mask(m)[None, None, :, :]
                     | (tgt_in == PAD)[:, None, None, :])
        cross_mask = src_pad[:, None, None, :]
        rate = c.dropout if training else 0.0
        y = T.scale(T.embed(self.tgt_embed, tgt_in), math.sqrt(c.d))
        for layer in self.decoder:
            a = relative_self_attention(y, layer.self_attn, layer.relpos,
                                        mask=self_mask)
            a = _drop(a, rate, dropout_rng)
            y = T.layer_norm(T.add(y, a), layer.norm1_gain, layer.norm1_bias)
            x = cross_attention(y, enc_out, layer.cross, mask=cross_mask)
            x = _drop(x, rate, dropout_rng)
            y = T.layer_norm(T.add(y, x), layer.norm2_gain, layer.norm2_bias)
            f = ffn_forward(y, layer.ffn)
            f = _drop(f, rate, dropout_rng)
            y = T.layer_norm(T.add(y, f), layer.norm3_gain, layer.norm3_bias)
        return y

    def logits(self, dec_out: Tensor) -> Tensor:
        return T.add(T.matmul(dec_out, self.out_w), self.out_b)

    def forward_logits(self, src, tgt_in, training=False, noise_rng=None,
                       dropout_rng=None, capture=None) -> Tensor:
        enc = self.encode(src, training, noise_rng, dropout_rng, capture)
        dec = self.decode(tgt_in, enc, np.asarray(src) == PAD, training,
                          dropout_rng)
        return self.logits(dec)

    # -- objective ----------------------------------------------------------

    def loss_with_penalty(self, logits: Tensor, tgt_out: np.ndarray,
                          tgt_pad: np.ndarray):
        """Label-smoothed CE over non-pad tokens plus weighted penalties.

        Returns (loss Tensor, ce value, penalty-sum value).
        """
        ls = smoothed_cross_entropy(logits, tgt_out, tgt_pad,
                                    self.config.label_smooth)
        pen_terms = [penalty(s) for s in self.shuffle_matrices()]
        pen_value = float(sum(p.data for p in pen_terms)) if pen_terms else 0.0
        loss = ls
        if pen_terms and self.config.penalty_weight:
            total_pen = pen_terms[0]
            for p in pen_terms[1:]:
                total_pen = T.add(total_pen, p)
            loss = T.add(ls, T.scale(total_pen, self.config.penalty_weight))
        return loss, float(ls.data), pen_value

    # -- decoding -----------------------------------------------------------

    def greedy_decode_batch(self, src: np.ndarray, max_len=None) -> list:
        """Deterministic argmax decoding; ties break to the lowest id.

        Returns one id array per row, each ending with eos unless the
        length cap cut it off.
        """
        c = self.config
        src = np.asarray(src)
        if max_len is None:
            max_len = c.max_len + 2
        batch = src.shape[0]
        src_pad = src == PAD
        with T.no_grad():
            enc = self.encode(src, training=False)
            out = np.full((batch, max_len), PAD, dtype=np.int64)
            done = np.zeros(batch, dtype=bool)
            length = np.zeros(batch, dtype=np.int64)
            tgt_in = np.full((batch, 1), BOS, dtype=np.int64)
            for t in range(max_len):
                dec = self.decode(tgt_in, enc, src_pad, training=False)
                step_logits = self.logits(dec).data[:, -1, :]
                tok = np.argmax(step_logits, axis=1)
                tok[done] = PAD
                out[:, t] = tok
                length[~done] = t + 1
                done |= tok == EOS
                if done.all():
                    break
                tgt_in = np.concatenate([tgt_in, tok[:, None]], axis=1)
        return [out[b, :length[b]].copy() for b in range(batch)]

    def greedy_decode(self, src: np.ndarray, max_len=None) -> np.ndarray:
        """Single-sequence decoding; pad-free 1-D input ids."""
        return self.greedy_decode_batch(np.asarray(src)[None, :], max_len)[0]


def _drop(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return T.mul(x, Tensor(keep))


def smoothed_cross_entropy(logits: Tensor, tgt_out: np.ndarray,
                           tgt_pad: np.ndarray, label_smooth: float) -> Tensor:
    """Mean label-smoothed cross entropy over non-pad positions.

    The smoothed target puts 1-eps on the true id and eps/V uniformly on
    the whole vocabulary.
    """
    tgt_out = np.asarray(tgt_out)
    tgt_pad = np.asarray(tgt_pad)
    vocab = logits.data.shape[-1]
    count = int((~tgt_pad).sum())
    if count == 0:
        raise ContractError("loss over fully padded targets is undefined")
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.data.shape, dtype=logits.data.dtype)
    rows = np.where(~tgt_pad)
    onehot[rows[0], rows[1], tgt_out[rows]] = 1.0
    weight = (~tgt_pad).astype(logits.data.dtype) / count
    eps = label_smooth
    picked = T.sum_(T.mul(logp, Tensor(onehot)), axis=-1)
    term = T.scale(picked, 1.0 - eps)
    if eps:
        term = T.add(term, T.scale(T.sum_(logp, axis=-1), eps / vocab))
    return T.neg(T.sum_(T.mul(term, Tensor(weight))))
